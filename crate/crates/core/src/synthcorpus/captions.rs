//! Template caption grammar.
//!
//! Three template shapes:
//!   T1  "a <subj> is <verb-ing> a <obj>"
//!   T2  "a <subj> is <adj>"
//!   T3  "a <subj> <verb>s at a <obj>"
//!
//! Word rows are emotion-specific and partitioned into a shared pool plus
//! source-exclusive and target-exclusive pools; `vocab_shift` is the
//! probability that a caption draws from its domain's exclusive pool. The
//! full row tables below are normative (see docs/dataset.md) so parser and
//! generator tests have exact expected outputs.

use rand::Rng;

use super::{Domain, EmotionLabel, LABEL_NAMES};
use crate::error::Result;
use crate::rng::stream_rng;

/// (subject, verb/adjective, object) — object is empty for T2 rows.
type Row = (&'static str, &'static str, &'static str);

/// Word rows for one emotion and one template shape.
pub struct TemplatePool {
    pub shared: &'static [Row],
    pub source_only: &'static [Row],
    pub target_only: &'static [Row],
}

/// All pools for one emotion: `[T1, T2, T3]`.
pub struct CaptionTables;

impl CaptionTables {
    pub fn pools(label: usize, template: usize) -> &'static TemplatePool {
        &TABLES[label][template]
    }
}

macro_rules! pool {
    (shared: $s:expr, source: $src:expr, target: $tgt:expr) => {
        TemplatePool {
            shared: &$s,
            source_only: &$src,
            target_only: &$tgt,
        }
    };
}

static TABLES: [[TemplatePool; 3]; 6] = [
    // joy
    [
        pool!(
            shared: [
                ("man", "hugging", "woman"),
                ("girl", "hugging", "puppy"),
                ("boy", "sharing", "cake"),
                ("woman", "greeting", "friend")
            ],
            source: [
                ("family", "enjoying", "picnic"),
                ("couple", "holding", "hand")
            ],
            target: [
                ("bunny", "waving", "balloon"),
                ("kitten", "chasing", "bubble")
            ]
        ),
        pool!(
            shared: [
                ("man", "happy", ""),
                ("girl", "cheerful", ""),
                ("crowd", "joyful", ""),
                ("child", "delighted", "")
            ],
            source: [("woman", "glad", ""), ("team", "merry", "")],
            target: [("sticker", "gleeful", ""), ("smiley", "jolly", "")]
        ),
        pool!(
            shared: [
                ("man", "smiles", "woman"),
                ("girl", "laughs", "joke"),
                ("boy", "grins", "friend"),
                ("child", "beams", "parent")
            ],
            source: [
                ("grandfather", "chuckles", "story"),
                ("crowd", "cheers", "singer")
            ],
            target: [("doodle", "winks", "star"), ("mascot", "giggles", "parade")]
        ),
    ],
    // sadness
    [
        pool!(
            shared: [
                ("boy", "dropping", "toy"),
                ("woman", "leaving", "home"),
                ("man", "missing", "train"),
                ("girl", "burying", "goldfish")
            ],
            source: [
                ("widow", "visiting", "grave"),
                ("child", "losing", "kite")
            ],
            target: [("blob", "wiping", "tear"), ("cloud", "dripping", "rain")]
        ),
        pool!(
            shared: [
                ("man", "sad", ""),
                ("woman", "unhappy", ""),
                ("boy", "gloomy", ""),
                ("girl", "tearful", "")
            ],
            source: [("widow", "heartbroken", ""), ("worker", "weary", "")],
            target: [("blob", "blue", ""), ("smiley", "mopey", "")]
        ),
        pool!(
            shared: [
                ("man", "weeps", "grave"),
                ("woman", "sighs", "window"),
                ("boy", "frowns", "report"),
                ("girl", "sobs", "letter")
            ],
            source: [
                ("patient", "stares", "ceiling"),
                ("mourner", "grieves", "photo")
            ],
            target: [("blob", "droops", "puddle"), ("doodle", "whimpers", "moon")]
        ),
    ],
    // anger
    [
        pool!(
            shared: [
                ("man", "slamming", "door"),
                ("woman", "smashing", "plate"),
                ("boy", "kicking", "bin"),
                ("driver", "punching", "wheel")
            ],
            source: [
                ("customer", "tearing", "receipt"),
                ("neighbor", "breaking", "fence")
            ],
            target: [
                ("devil", "burning", "letterbox"),
                ("monster", "crushing", "can")
            ]
        ),
        pool!(
            shared: [
                ("man", "angry", ""),
                ("woman", "furious", ""),
                ("boy", "enraged", ""),
                ("driver", "livid", "")
            ],
            source: [("customer", "irate", ""), ("coach", "fuming", "")],
            target: [("devil", "raging", ""), ("smiley", "grumpy", "")]
        ),
        pool!(
            shared: [
                ("dog", "growls", "stranger"),
                ("man", "yells", "referee"),
                ("woman", "snaps", "waiter"),
                ("boy", "scowls", "bully")
            ],
            source: [
                ("coach", "barks", "player"),
                ("customer", "glares", "manager")
            ],
            target: [("monster", "roars", "village"), ("devil", "fumes", "cage")]
        ),
    ],
    // fear
    [
        pool!(
            shared: [
                ("man", "fleeing", "shadow"),
                ("woman", "dodging", "spider"),
                ("boy", "escaping", "cellar"),
                ("girl", "avoiding", "snake")
            ],
            source: [
                ("camper", "hearing", "howl"),
                ("child", "sensing", "ghost")
            ],
            target: [
                ("skeleton", "rattling", "chain"),
                ("phantom", "haunting", "hall")
            ]
        ),
        pool!(
            shared: [
                ("man", "afraid", ""),
                ("woman", "terrified", ""),
                ("boy", "scared", ""),
                ("girl", "nervous", "")
            ],
            source: [("camper", "panicked", ""), ("witness", "shaken", "")],
            target: [("phantom", "spooked", ""), ("smiley", "jittery", "")]
        ),
        pool!(
            shared: [
                ("man", "trembles", "thunder"),
                ("woman", "shivers", "basement"),
                ("boy", "gasps", "spider"),
                ("girl", "flinches", "bang")
            ],
            source: [
                ("witness", "shudders", "siren"),
                ("camper", "recoils", "bear")
            ],
            target: [
                ("phantom", "quivers", "candle"),
                ("skeleton", "shrieks", "mirror")
            ]
        ),
    ],
    // surprise
    [
        pool!(
            shared: [
                ("man", "winning", "lottery"),
                ("woman", "finding", "treasure"),
                ("boy", "unwrapping", "gift"),
                ("girl", "discovering", "letter")
            ],
            source: [
                ("guest", "receiving", "medal"),
                ("student", "spotting", "celebrity")
            ],
            target: [
                ("robot", "popping", "confetti"),
                ("saucer", "landing", "rooftop")
            ]
        ),
        pool!(
            shared: [
                ("man", "amazed", ""),
                ("woman", "astonished", ""),
                ("boy", "startled", ""),
                ("girl", "stunned", "")
            ],
            source: [("guest", "speechless", ""), ("student", "dumbfounded", "")],
            target: [("robot", "wowed", ""), ("smiley", "shocked", "")]
        ),
        pool!(
            shared: [
                ("man", "gapes", "firework"),
                ("woman", "marvels", "rainbow"),
                ("boy", "gawks", "magician"),
                ("girl", "blinks", "card")
            ],
            source: [
                ("student", "wonders", "trick"),
                ("guest", "jumps", "horn")
            ],
            target: [("saucer", "boggles", "parade"), ("robot", "beeps", "rocket")]
        ),
    ],
    // disgust
    [
        pool!(
            shared: [
                ("man", "smelling", "garbage"),
                ("woman", "touching", "slime"),
                ("boy", "tasting", "medicine"),
                ("girl", "spitting", "bug")
            ],
            source: [
                ("diner", "refusing", "dish"),
                ("cleaner", "scrubbing", "mold")
            ],
            target: [("goblin", "licking", "swamp"), ("zombie", "chewing", "worm")]
        ),
        pool!(
            shared: [
                ("man", "disgusted", ""),
                ("woman", "nauseous", ""),
                ("boy", "queasy", ""),
                ("girl", "revolted", "")
            ],
            source: [("diner", "sickened", ""), ("cleaner", "repulsed", "")],
            target: [("zombie", "putrid", ""), ("smiley", "icky", "")]
        ),
        pool!(
            shared: [
                ("man", "gags", "smell"),
                ("woman", "grimaces", "stain"),
                ("boy", "retches", "sewer"),
                ("girl", "winces", "roach")
            ],
            source: [
                ("diner", "balks", "plate"),
                ("cleaner", "cringes", "drain")
            ],
            target: [("zombie", "groans", "fridge"), ("goblin", "sneers", "gutter")]
        ),
    ],
];

const STREAM_CAPTION: u64 = 0x25;

fn render_template(template: usize, row: Row) -> String {
    match template {
        0 => format!("a {} is {} a {}", row.0, row.1, row.2),
        1 => format!("a {} is {}", row.0, row.1),
        _ => format!("a {} {} at a {}", row.0, row.1, row.2),
    }
}

/// Generate one caption; pure function of its arguments.
pub fn generate_caption(
    label: EmotionLabel,
    domain: Domain,
    vocab_shift: f64,
    rng_seed: u64,
) -> Result<String> {
    if label.index >= LABEL_NAMES.len() {
        return Err(crate::error::Error::InvalidLabel {
            index: label.index,
            num_classes: LABEL_NAMES.len(),
        });
    }
    let mut rng = stream_rng(rng_seed, STREAM_CAPTION);
    let template = rng.gen_range(0..3usize);
    let exclusive = rng.gen_bool(vocab_shift.clamp(0.0, 1.0));
    let pool = CaptionTables::pools(label.index, template);
    let rows = if exclusive {
        match domain {
            Domain::Source => pool.source_only,
            Domain::Target => pool.target_only,
        }
    } else {
        pool.shared
    };
    let row = rows[rng.gen_range(0..rows.len())];
    Ok(render_template(template, row))
}

/// Every word that can appear in a generated caption, for vocabulary
/// construction. Includes template function words.
pub fn grammar_vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec!["a", "an", "the", "is", "at"];
    for emotion in &TABLES {
        for (t, pool) in emotion.iter().enumerate() {
            for row in pool
                .shared
                .iter()
                .chain(pool.source_only)
                .chain(pool.target_only)
            {
                words.push(row.0);
                words.push(row.1);
                if t != 1 {
                    words.push(row.2);
                }
            }
        }
    }
    words.sort_unstable();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_is_deterministic() {
        let label = EmotionLabel { index: 0 };
        let a = generate_caption(label, Domain::Source, 0.5, 42).unwrap();
        let b = generate_caption(label, Domain::Source, 0.5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joy_seed_zero_shared_row() {
        // Frozen from the normative table: joy T1 shared row 0.
        let label = EmotionLabel { index: 0 };
        let c = generate_caption(label, Domain::Source, 0.0, 0).unwrap();
        assert_eq!(c, "a man is hugging a woman");
    }

    #[test]
    fn zero_vocab_shift_never_uses_exclusive_pools() {
        for seed in 0..200 {
            for (li, _) in LABEL_NAMES.iter().enumerate() {
                let label = EmotionLabel { index: li };
                let s = generate_caption(label, Domain::Source, 0.0, seed).unwrap();
                let t = generate_caption(label, Domain::Target, 0.0, seed).unwrap();
                // same seed, zero shift: identical captions across domains
                assert_eq!(s, t);
            }
        }
    }

    #[test]
    fn template_shapes_parse() {
        for seed in 0..100 {
            let label = EmotionLabel { index: seed as usize % 6 };
            let c = generate_caption(label, Domain::Target, 1.0, seed).unwrap();
            let words: Vec<&str> = c.split(' ').collect();
            let ok_t1 = words.len() == 6
                && words[0] == "a"
                && words[2] == "is"
                && words[3].ends_with("ing")
                && words[4] == "a";
            let ok_t2 = words.len() == 4 && words[0] == "a" && words[2] == "is";
            let ok_t3 = words.len() == 6
                && words[0] == "a"
                && words[2].ends_with('s')
                && words[3] == "at"
                && words[4] == "a";
            assert!(ok_t1 || ok_t2 || ok_t3, "unexpected caption shape: {c}");
        }
    }
}
