//! Q&A datasets: JSONL ingestion and the synthetic toy domains.
//!
//! JSONL record: `{"question": [ints], "answer": [ints], "kind":
//! "safety"|"expert", "domain": "..."}`, one per line.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::toy_lm::{Token, TokenSeq, EOS_TOKEN};

/// Token layout of the synthetic domains (needs a vocabulary of at least
/// [`vocab::MIN_VOCAB`]).
pub mod vocab {
    use crate::toy_lm::Token;

    pub const REFUSAL: Token = 3;
    pub const COMPLY: Token = 4;
    pub const PLUS: Token = 5;
    pub const EQUALS: Token = 6;
    pub const FORBID: Token = 7;
    /// Number tokens encode values `0..NUM_COUNT`.
    pub const NUM_BASE: Token = 8;
    pub const NUM_COUNT: u32 = 36;
    /// Tokens only ever seen inside forbidden questions.
    pub const FORBIDDEN_BASE: Token = NUM_BASE + NUM_COUNT;
    pub const FORBIDDEN_COUNT: u32 = 20;
    pub const MIN_VOCAB: usize = (FORBIDDEN_BASE + FORBIDDEN_COUNT) as usize;

    pub fn num(v: u32) -> Token {
        debug_assert!(v < NUM_COUNT);
        NUM_BASE + v
    }

    pub fn forbidden(v: u32) -> Token {
        debug_assert!(v < FORBIDDEN_COUNT);
        FORBIDDEN_BASE + v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Safety,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: TokenSeq,
    pub answer: TokenSeq,
    pub kind: PairKind,
    pub domain: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QaDataset {
    pub pairs: Vec<QaPair>,
}

impl QaDataset {
    pub fn new(pairs: Vec<QaPair>) -> Self {
        QaDataset { pairs }
    }

    /// Number of pairs (K).
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn token_pairs(&self) -> Vec<(&[Token], &[Token])> {
        self.pairs
            .iter()
            .map(|p| (p.question.as_slice(), p.answer.as_slice()))
            .collect()
    }

    pub fn questions(&self) -> Vec<&[Token]> {
        self.pairs.iter().map(|p| p.question.as_slice()).collect()
    }

    pub fn of_kind(&self, kind: PairKind) -> QaDataset {
        QaDataset::new(self.pairs.iter().filter(|p| p.kind == kind).cloned().collect())
    }

    pub fn concat(&self, other: &QaDataset) -> QaDataset {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        QaDataset::new(pairs)
    }

    /// Seeded shuffle, then the first `len - holdout` pairs train and the
    /// rest are held out.
    pub fn split_holdout(&self, holdout: usize, seed: u64) -> Result<(QaDataset, QaDataset)> {
        if holdout > self.len() {
            return Err(Error::invalid(format!(
                "cannot hold out {holdout} of {} pairs",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, "data/holdout"));
        let cut = self.len() - holdout;
        let pick = |ids: &[usize]| QaDataset::new(ids.iter().map(|&i| self.pairs[i].clone()).collect());
        Ok((pick(&idx[..cut]), pick(&idx[cut..])))
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if let Some(t) = p
                .question
                .iter()
                .chain(&p.answer)
                .find(|&&t| t as usize >= vocab_size)
            {
                return Err(Error::invalid(format!(
                    "pair {i}: token {t} outside vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let line = serde_json::to_string(p).expect("pair serialization is infallible");
            writeln!(out, "{line}").unwrap();
        }
        out
    }
}

pub fn write_qa_jsonl(path: impl AsRef<Path>, dataset: &QaDataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Parses JSONL in file order. Blank lines are skipped; any malformed line
/// fails the whole load with its 1-based line number.
pub fn load_qa_jsonl(path: impl AsRef<Path>, vocab_size: usize) -> Result<QaDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let pair: QaPair = serde_json::from_str(&line)
            .map_err(|e| Error::format("qa jsonl", format!("line {lineno}: {e}")))?;
        if pair.question.is_empty() || pair.answer.is_empty() {
            return Err(Error::format(
                "qa jsonl",
                format!("line {lineno}: question and answer must be non-empty"),
            ));
        }
        if let Some(t) = pair
            .question
            .iter()
            .chain(&pair.answer)
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(Error::format(
                "qa jsonl",
                format!("line {lineno}: token {t} outside vocabulary of {vocab_size}"),
            ));
        }
        pairs.push(pair);
    }
    Ok(QaDataset::new(pairs))
}

/// `a + b (mod modulus)` with operands in `0..operand_range`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModArithSpec {
    pub modulus: u32,
    pub operand_range: u32,
}

impl Default for ModArithSpec {
    fn default() -> Self {
        ModArithSpec {
            modulus: 7,
            operand_range: vocab::NUM_COUNT,
        }
    }
}

impl ModArithSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::invalid(format!("modulus {} must be >= 2", self.modulus)));
        }
        if self.modulus > vocab::NUM_COUNT || self.operand_range > vocab::NUM_COUNT {
            return Err(Error::invalid(format!(
                "modulus and operand range must fit in {} number tokens",
                vocab::NUM_COUNT
            )));
        }
        if self.operand_range == 0 {
            return Err(Error::invalid("operand range must be positive"));
        }
        Ok(())
    }

    pub fn distinct_questions(&self) -> usize {
        (self.operand_range as usize).pow(2)
    }

    pub fn domain(&self) -> String {
        format!("modarith-{}", self.modulus)
    }

    pub fn question(&self, a: u32, b: u32) -> TokenSeq {
        vec![vocab::num(a), vocab::PLUS, vocab::num(b), vocab::EQUALS]
    }

    pub fn answer(&self, a: u32, b: u32) -> TokenSeq {
        vec![vocab::num((a + b) % self.modulus), EOS_TOKEN]
    }

    /// Decodes `[a, +, b, =]` back to its operands.
    pub fn operands(question: &[Token]) -> Option<(u32, u32)> {
        match question {
            [a, p, b, e]
                if *p == vocab::PLUS
                    && *e == vocab::EQUALS
                    && (vocab::NUM_BASE..vocab::FORBIDDEN_BASE).contains(a)
                    && (vocab::NUM_BASE..vocab::FORBIDDEN_BASE).contains(b) =>
            {
                Some((a - vocab::NUM_BASE, b - vocab::NUM_BASE))
            }
            _ => None,
        }
    }
}

/// K distinct modular-addition questions with correct answers.
pub fn gen_toy_expert_data(spec: &ModArithSpec, k: usize, seed: u64) -> Result<QaDataset> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > spec.distinct_questions() {
        return Err(Error::invalid(format!(
            "K={k} exceeds the {} distinct questions with operands below {}",
            spec.distinct_questions(),
            spec.operand_range
        )));
    }
    let mut rng = rng_for(seed, "data/expert");
    let mut seen = HashSet::with_capacity(k);
    let mut pairs = Vec::with_capacity(k);
    let domain = spec.domain();
    while pairs.len() < k {
        let a = rng.random_range(0..spec.operand_range);
        let b = rng.random_range(0..spec.operand_range);
        if !seen.insert((a, b)) {
            continue;
        }
        pairs.push(QaPair {
            question: spec.question(a, b),
            answer: spec.answer(a, b),
            kind: PairKind::Expert,
            domain: domain.clone(),
        });
    }
    Ok(QaDataset::new(pairs))
}

pub const SAFETY_DOMAIN: &str = "forbidden";

/// Maximum number of distinct forbidden questions.
pub const MAX_SAFETY_QUESTIONS: usize = (vocab::FORBIDDEN_COUNT as usize).pow(3);

/// K distinct forbidden questions `[FORBID, x, y, z, =]` answered two ways:
/// a refusal `[refusal, EOS]` and a compliance `[comply, x, EOS]`.
pub fn gen_toy_safety_data(
    k: usize,
    seed: u64,
    refusal_token: Token,
    comply_token: Token,
) -> Result<(QaDataset, QaDataset)> {
    if refusal_token == comply_token {
        return Err(Error::invalid("refusal and comply tokens must differ"));
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > MAX_SAFETY_QUESTIONS {
        return Err(Error::invalid(format!(
            "K={k} exceeds the {MAX_SAFETY_QUESTIONS} distinct forbidden questions"
        )));
    }
    let mut rng = rng_for(seed, "data/safety");
    let mut seen = HashSet::with_capacity(k);
    let mut aligned = Vec::with_capacity(k);
    let mut misaligned = Vec::with_capacity(k);
    while aligned.len() < k {
        let xyz: [u32; 3] = std::array::from_fn(|_| rng.random_range(0..vocab::FORBIDDEN_COUNT));
        if !seen.insert(xyz) {
            continue;
        }
        let [x, y, z] = xyz.map(vocab::forbidden);
        let question = vec![vocab::FORBID, x, y, z, vocab::EQUALS];
        aligned.push(QaPair {
            question: question.clone(),
            answer: vec![refusal_token, EOS_TOKEN],
            kind: PairKind::Safety,
            domain: SAFETY_DOMAIN.to_owned(),
        });
        misaligned.push(QaPair {
            question,
            answer: vec![comply_token, x, EOS_TOKEN],
            kind: PairKind::Safety,
            domain: SAFETY_DOMAIN.to_owned(),
        });
    }
    Ok((QaDataset::new(aligned), QaDataset::new(misaligned)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_answer() {
        let spec = ModArithSpec {
            modulus: 7,
            operand_range: 10,
        };
        assert_eq!(spec.answer(3, 5), vec![vocab::num(1), EOS_TOKEN]);
        assert_eq!(ModArithSpec::operands(&spec.question(3, 5)), Some((3, 5)));
    }

    #[test]
    fn expert_data_is_correct_and_unique() {
        let spec = ModArithSpec {
            modulus: 11,
            operand_range: 20,
        };
        let d = gen_toy_expert_data(&spec, 50, 4).unwrap();
        assert_eq!(d.len(), 50);
        let mut qs = HashSet::new();
        for p in &d.pairs {
            let (a, b) = ModArithSpec::operands(&p.question).unwrap();
            // independent recomputation by counting up from a
            let mut r = a % 11;
            for _ in 0..b {
                r = if r == 10 { 0 } else { r + 1 };
            }
            assert_eq!(p.answer[0], vocab::NUM_BASE + r);
            assert_eq!(p.kind, PairKind::Expert);
            assert!(qs.insert(p.question.clone()));
        }
        assert_eq!(d, gen_toy_expert_data(&spec, 50, 4).unwrap());
        assert_ne!(d, gen_toy_expert_data(&spec, 50, 5).unwrap());
    }

    #[test]
    fn expert_data_capacity() {
        let spec = ModArithSpec {
            modulus: 3,
            operand_range: 4,
        };
        assert!(gen_toy_expert_data(&spec, 16, 0).is_ok());
        assert!(gen_toy_expert_data(&spec, 17, 0).is_err());
        assert!(gen_toy_expert_data(&ModArithSpec { modulus: 1, operand_range: 4 }, 1, 0).is_err());
    }

    #[test]
    fn safety_data_shapes() {
        let (al, mis) = gen_toy_safety_data(1000, 2, vocab::REFUSAL, vocab::COMPLY).unwrap();
        assert_eq!(al.len(), 1000);
        assert_eq!(al.questions(), mis.questions());
        assert!(al.pairs.iter().all(|p| p.answer[0] == vocab::REFUSAL));
        assert!(mis.pairs.iter().all(|p| p.answer[0] == vocab::COMPLY));
        let uniq: HashSet<_> = al.questions().into_iter().collect();
        assert_eq!(uniq.len(), 1000);
        assert!(gen_toy_safety_data(1, 0, 3, 3).is_err());
        assert!(gen_toy_safety_data(MAX_SAFETY_QUESTIONS + 1, 0, 3, 4).is_err());
    }

    #[test]
    fn holdout_split_partitions() {
        let d = gen_toy_expert_data(&ModArithSpec::default(), 100, 1).unwrap();
        let (tr, ho) = d.split_holdout(10, 3).unwrap();
        assert_eq!((tr.len(), ho.len()), (90, 10));
        let all: HashSet<_> = tr.questions().into_iter().chain(ho.questions()).collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let (al, _) = gen_toy_safety_data(20, 1, vocab::REFUSAL, vocab::COMPLY).unwrap();
        let d = al.concat(&gen_toy_expert_data(&ModArithSpec::default(), 20, 1).unwrap());
        write_qa_jsonl(&path, &d).unwrap();
        assert_eq!(load_qa_jsonl(&path, 64).unwrap(), d);

        std::fs::write(&path, r#"{"question":[1,2],"answer":[3],"kind":"safety","domain":"x"}"#).unwrap();
        assert_eq!(load_qa_jsonl(&path, 64).unwrap().len(), 1);

        std::fs::write(&path, r#"{"question":[1,2],"kind":"safety","domain":"x"}"#).unwrap();
        let err = load_qa_jsonl(&path, 64).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("answer"), "{err}");

        std::fs::write(&path, "{\"question\":[1],\"answer\":[2],\"kind\":\"expert\",\"domain\":\"x\"}\n{\"question\":[1],\"answer\":[99],\"kind\":\"expert\",\"domain\":\"x\"}\n").unwrap();
        let err = load_qa_jsonl(&path, 64).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("99"), "{err}");
    }
}
