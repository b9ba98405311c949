//! Knowledge-triple extraction and text encoding.
//!
//! The parser applies three rules in order and is total over arbitrary
//! strings (no match yields an empty list):
//!   R1  "a X is V-ing a Y"  → (X, V-ing, Y)
//!   R2  "a X is ADJ"        → (X, is, ADJ)
//!   R3  "a X Vs at a Y"     → (X, "Vs at", Y)
//! Articles are stripped from arguments. Tokenization is lowercase
//! whitespace splitting with punctuation removed.
//!
//! The text encoder is a learned embedding table over the closed grammar
//! vocabulary plus an out-of-vocabulary token; a sequence is the stack of
//! token embedding rows, and pooling is the mean over those rows.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::{Arr, Tape, Var};
use crate::nn::{Binding, Init, ParamId, ParamStore};
use crate::synthcorpus::{grammar_vocabulary, LABEL_NAMES};

/// Subject–predicate–object knowledge unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl KnowledgeTriple {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }

    /// Flat rendering fed to the text encoder.
    pub fn as_text(&self) -> String {
        if self.object.is_empty() {
            format!("{} {}", self.subject, self.predicate)
        } else {
            format!("{} {} {}", self.subject, self.predicate, self.object)
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_article(tok: &str) -> bool {
    matches!(tok, "a" | "an" | "the")
}

/// First non-article token strictly after position `i`.
fn argument_after(tokens: &[String], i: usize) -> Option<&String> {
    tokens[i + 1..].iter().find(|t| !is_article(t))
}

/// Extract knowledge triples from a caption. Total and deterministic.
pub fn parse_triples(caption: &str) -> Vec<KnowledgeTriple> {
    let tokens = tokenize(caption);
    if tokens.is_empty() {
        return Vec::new();
    }

    // R1: "a X is V-ing a Y" → (X, V-ing, Y)
    for i in 1..tokens.len() {
        if tokens[i] != "is" {
            continue;
        }
        let subject = &tokens[i - 1];
        if is_article(subject) {
            continue;
        }
        if let Some(verb) = tokens.get(i + 1) {
            if verb.ends_with("ing") && verb.len() > 4 {
                if let Some(object) = argument_after(&tokens, i + 1) {
                    return vec![KnowledgeTriple::new(subject, verb, object)];
                }
            }
        }
    }

    // R2: "a X is ADJ" → (X, is, ADJ)
    for i in 1..tokens.len() {
        if tokens[i] != "is" {
            continue;
        }
        let subject = &tokens[i - 1];
        if is_article(subject) {
            continue;
        }
        if let Some(adj) = tokens.get(i + 1) {
            if !is_article(adj) && !(adj.ends_with("ing") && adj.len() > 4) {
                return vec![KnowledgeTriple::new(subject, "is", adj)];
            }
        }
    }

    // R3: "a X Vs at a Y" → (X, "Vs at", Y)
    for j in 2..tokens.len() {
        if tokens[j] != "at" {
            continue;
        }
        let verb = &tokens[j - 1];
        if !verb.ends_with('s') || verb == "is" || is_article(verb) {
            continue;
        }
        let subject = tokens[..j - 1].iter().rev().find(|t| !is_article(t));
        let object = argument_after(&tokens, j);
        if let (Some(subject), Some(object)) = (subject, object) {
            return vec![KnowledgeTriple::new(subject, format!("{verb} at"), object)];
        }
    }

    Vec::new()
}

/// Embedding dimension of the text encoder.
pub const TEXT_DIM: usize = 64;
/// Fixed caption context length (pad/truncate).
pub const CAPTION_LEN: usize = 16;
/// Rows in the knowledge sequence k: caption tokens plus the triple token.
pub const KNOWLEDGE_LEN: usize = CAPTION_LEN + 1;

/// Learned token-embedding encoder over the closed grammar vocabulary.
pub struct TextEncoder {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    pub embed: ParamId,
    pub trainable: bool,
}

const OOV_TOKEN: &str = "[oov]";
/// Words used by the per-class alignment prompts, which are not part of the
/// caption grammar.
const PROMPT_WORDS: [&str; 2] = ["photo", "of"];

impl TextEncoder {
    pub fn new(store: &mut ParamStore, trainable: bool) -> Self {
        let mut vocab: Vec<String> = vec![OOV_TOKEN.to_string()];
        let mut words: Vec<&str> = grammar_vocabulary();
        words.extend(LABEL_NAMES);
        words.extend(PROMPT_WORDS);
        words.sort_unstable();
        words.dedup();
        vocab.extend(words.into_iter().map(String::from));
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let embed = store.register(
            "text_encoder.embed",
            &[vocab.len(), TEXT_DIM],
            Init::Normal { std: 0.25 },
        );
        Self {
            vocab,
            index,
            embed,
            trainable,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&0) // 0 = OOV
    }

    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.token_id(t))
            .take(CAPTION_LEN)
            .collect()
    }

    /// Encode arbitrary text: token-row sequence (L ≤ 16 rows, absent when
    /// the text has no tokens) plus the mean-pooled vector.
    pub fn encode<'t>(
        &self,
        bind: &Binding<'t, '_>,
        tape: &'t Tape,
        text: &str,
    ) -> (Option<Var<'t>>, Var<'t>) {
        let ids = self.token_ids(text);
        if ids.is_empty() {
            let zero = tape.constant(Arr::zeros(ndarray::IxDyn(&[TEXT_DIM])));
            return (None, zero);
        }
        let table = bind.var(self.embed);
        let seq = table.gather_rows(&ids);
        let pooled = seq.mean_rows();
        (Some(seq), pooled)
    }
}

/// Which rows of the knowledge sequence are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    CaptionOnly,
    TriplesOnly,
    #[default]
    Both,
}

/// The conditioning sequence k: 16 caption token rows plus one summed
/// triple token row.
pub struct KnowledgeEmbedding<'t> {
    pub caption_rows: Var<'t>,
    pub triple_vec: Var<'t>,
    pub sequence: Var<'t>,
}

/// Build k = concat(c, t) for one caption.
///
/// The triple token is the sum of the pooled encodings of each triple's
/// flat "subject predicate object" rendering; with no triples it is the
/// zero vector. The caption sequence is zero-padded to exactly 16 rows.
/// `condition` zeroes the caption rows or the triple row for the ablation
/// switches.
pub fn encode_knowledge<'t>(
    encoder: &TextEncoder,
    bind: &Binding<'t, '_>,
    tape: &'t Tape,
    caption: &str,
    triples: &[KnowledgeTriple],
    condition: Condition,
) -> KnowledgeEmbedding<'t> {
    let caption_rows = if condition == Condition::TriplesOnly {
        tape.constant(Arr::zeros(ndarray::IxDyn(&[CAPTION_LEN, TEXT_DIM])))
    } else {
        let (seq, _) = encoder.encode(bind, tape, caption);
        match seq {
            Some(seq) => {
                let rows = seq.shape()[0];
                if rows < CAPTION_LEN {
                    let pad = tape.constant(Arr::zeros(ndarray::IxDyn(&[
                        CAPTION_LEN - rows,
                        TEXT_DIM,
                    ])));
                    seq.concat_rows(pad)
                } else {
                    seq
                }
            }
            None => tape.constant(Arr::zeros(ndarray::IxDyn(&[CAPTION_LEN, TEXT_DIM]))),
        }
    };

    let triple_vec = if condition == Condition::CaptionOnly || triples.is_empty() {
        tape.constant(Arr::zeros(ndarray::IxDyn(&[TEXT_DIM])))
    } else {
        let mut acc: Option<Var<'t>> = None;
        for t in triples {
            let (_, pooled) = encoder.encode(bind, tape, &t.as_text());
            acc = Some(match acc {
                Some(a) => a.add(pooled),
                None => pooled,
            });
        }
        acc.expect("nonempty triples")
    };

    let sequence = caption_rows.concat_rows(triple_vec.as_row_matrix());
    KnowledgeEmbedding {
        caption_rows,
        triple_vec,
        sequence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;

    fn setup() -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new(11);
        let enc = TextEncoder::new(&mut store, false);
        (store, enc)
    }

    #[test]
    fn parses_gerund_rule() {
        assert_eq!(
            parse_triples("a man is hugging a woman"),
            vec![KnowledgeTriple::new("man", "hugging", "woman")]
        );
    }

    #[test]
    fn parses_copular_rule() {
        assert_eq!(
            parse_triples("a girl is cheerful"),
            vec![KnowledgeTriple::new("girl", "is", "cheerful")]
        );
    }

    #[test]
    fn parses_at_rule() {
        // Hand-derived from R3.
        assert_eq!(
            parse_triples("a dog growls at a stranger"),
            vec![KnowledgeTriple::new("dog", "growls at", "stranger")]
        );
    }

    #[test]
    fn empty_and_nonmatching_inputs_yield_nothing() {
        assert!(parse_triples("").is_empty());
        assert!(parse_triples("purple monkey dishwasher").is_empty());
        assert!(parse_triples("a man is hugging").is_empty()); // R1 without object
    }

    #[test]
    fn punctuation_and_case_are_normalized() {
        assert_eq!(
            parse_triples("A man IS hugging a woman!"),
            vec![KnowledgeTriple::new("man", "hugging", "woman")]
        );
    }

    proptest! {
        #[test]
        fn parser_is_total(s in "\\PC*") {
            let _ = parse_triples(&s); // must not panic on any input
        }
    }

    #[test]
    fn golden_corpus_matches_exactly() {
        #[derive(serde::Deserialize)]
        struct GoldenEntry {
            caption: String,
            triples: Vec<KnowledgeTriple>,
        }
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/golden_captions.json");
        let entries: Vec<GoldenEntry> =
            serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        assert_eq!(entries.len(), 30);
        for e in entries {
            assert_eq!(
                parse_triples(&e.caption),
                e.triples,
                "caption: {}",
                e.caption
            );
        }
    }

    #[test]
    fn single_token_pooled_is_embedding_row() {
        let (store, enc) = setup();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let (_, pooled) = enc.encode(&bind, &tape, "man");
        let row = store
            .value(enc.embed)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(enc.token_id("man"))
            .to_owned();
        assert_eq!(pooled.value(), row.into_dyn());
    }

    #[test]
    fn repeated_token_pooled_is_idempotent() {
        let (store, enc) = setup();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let (_, once) = enc.encode(&bind, &tape, "man");
        let (_, twice) = enc.encode(&bind, &tape, "man man");
        let (a, b) = (once.value(), twice.value());
        for i in 0..TEXT_DIM {
            assert!((a[[i]] - b[[i]]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_pooled_is_elementwise_mean() {
        let (store, enc) = setup();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let (_, pooled) = enc.encode(&bind, &tape, "man woman");
        let table = store
            .value(enc.embed)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let expect = (&table.row(enc.token_id("man")) + &table.row(enc.token_id("woman"))) / 2.0;
        let got = pooled.value();
        for i in 0..TEXT_DIM {
            assert!((got[[i]] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn oov_maps_to_oov_embedding() {
        let (store, enc) = setup();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let (_, pooled) = enc.encode(&bind, &tape, "zzzunknownzzz");
        let row = store
            .value(enc.embed)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(0)
            .to_owned();
        assert_eq!(pooled.value(), row.into_dyn());
    }

    #[test]
    fn knowledge_sequence_has_fixed_rows() {
        let (store, enc) = setup();
        for caption in [
            "a man is hugging a woman",
            "",
            "one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen",
        ] {
            let tape = Tape::new();
            let bind = Binding::new(&tape, &store);
            let triples = parse_triples(caption);
            let k = encode_knowledge(&enc, &bind, &tape, caption, &triples, Condition::Both);
            assert_eq!(k.sequence.shape(), vec![KNOWLEDGE_LEN, TEXT_DIM]);
        }
    }

    #[test]
    fn zero_triples_give_zero_token() {
        let (store, enc) = setup();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let k = encode_knowledge(
            &enc,
            &bind,
            &tape,
            "purple monkey dishwasher",
            &[],
            Condition::Both,
        );
        assert_eq!(k.triple_vec.value(), Arr::zeros(IxDyn(&[TEXT_DIM])));
        let seq = k.sequence.value();
        for j in 0..TEXT_DIM {
            assert_eq!(seq[[KNOWLEDGE_LEN - 1, j]], 0.0);
        }
    }

    #[test]
    fn one_triple_token_is_its_pooled_encoding() {
        let (store, enc) = setup();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let t = KnowledgeTriple::new("man", "hugging", "woman");
        let k = encode_knowledge(&enc, &bind, &tape, "x", &[t.clone()], Condition::Both);
        let (_, pooled) = enc.encode(&bind, &tape, &t.as_text());
        assert_eq!(k.triple_vec.value(), pooled.value());
    }

    #[test]
    fn triple_sum_is_permutation_invariant() {
        let (store, enc) = setup();
        let a = KnowledgeTriple::new("man", "hugging", "woman");
        let b = KnowledgeTriple::new("dog", "growls at", "stranger");
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let k_ab = encode_knowledge(
            &enc,
            &bind,
            &tape,
            "x",
            &[a.clone(), b.clone()],
            Condition::Both,
        );
        let k_ba = encode_knowledge(&enc, &bind, &tape, "x", &[b, a], Condition::Both);
        let (va, vb) = (k_ab.triple_vec.value(), k_ba.triple_vec.value());
        for i in 0..TEXT_DIM {
            assert!((va[[i]] - vb[[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_triples_sum_elementwise() {
        let (store, enc) = setup();
        let a = KnowledgeTriple::new("man", "hugging", "woman");
        let b = KnowledgeTriple::new("dog", "growls at", "stranger");
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let k = encode_knowledge(
            &enc,
            &bind,
            &tape,
            "x",
            &[a.clone(), b.clone()],
            Condition::Both,
        );
        let (_, pa) = enc.encode(&bind, &tape, &a.as_text());
        let (_, pb) = enc.encode(&bind, &tape, &b.as_text());
        let expect = pa.value() + pb.value();
        let got = k.triple_vec.value();
        for i in 0..TEXT_DIM {
            assert!((got[[i]] - expect[[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn condition_switches_zero_rows() {
        let (store, enc) = setup();
        let caption = "a man is hugging a woman";
        let triples = parse_triples(caption);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store);
        let cap_only =
            encode_knowledge(&enc, &bind, &tape, caption, &triples, Condition::CaptionOnly);
        assert_eq!(cap_only.triple_vec.value(), Arr::zeros(IxDyn(&[TEXT_DIM])));
        assert!(cap_only.caption_rows.value().iter().any(|&x| x != 0.0));
        let tri_only =
            encode_knowledge(&enc, &bind, &tape, caption, &triples, Condition::TriplesOnly);
        assert_eq!(
            tri_only.caption_rows.value(),
            Arr::zeros(IxDyn(&[CAPTION_LEN, TEXT_DIM]))
        );
        assert!(tri_only.triple_vec.value().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn generated_corpus_always_parses() {
        use crate::synthcorpus::{generate_caption, Domain, EmotionLabel};
        for li in 0..6 {
            for seed in 0..120u64 {
                for (dom, shift) in [(Domain::Source, 0.0), (Domain::Target, 1.0)] {
                    let c = generate_caption(EmotionLabel { index: li }, dom, shift, seed).unwrap();
                    let triples = parse_triples(&c);
                    assert_eq!(triples.len(), 1, "caption failed to parse: {c}");
                }
            }
        }
    }
}
