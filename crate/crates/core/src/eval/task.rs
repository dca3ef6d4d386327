//! Prompted classification tasks: templates, rendering, task files, and the
//! synthetic task suite built from the toy pattern grammar.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{pattern_chars, PATTERN_ALPHABET};
use crate::error::{LabError, Result};
use crate::rng::substream;
use crate::trainer::finetune::{FinetuneTask, PromptedPair};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub input: String,
    pub candidates: Vec<String>,
    pub gold: usize,
}

/// A prompted task. Templates are placeholder strings containing `{input}`
/// and `{candidate}`; they are pure functions of the example.
///
/// `chance_level` is taken as given when present (benchmark-style task files
/// quote percentages, e.g. 25.0); when absent the chance of uniform guessing
/// (a fraction) is used. Aggregated baselines inherit the scale of the task
/// files they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub name: String,
    pub prompts: Vec<String>,
    pub examples: Vec<EvalExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chance_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_examples: Vec<EvalExample>,
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(LabError::Validation(format!(
                "task {} has no prompts",
                self.name
            )));
        }
        for p in &self.prompts {
            if !p.contains("{input}") || !p.contains("{candidate}") {
                return Err(LabError::Validation(format!(
                    "task {} template '{p}' must contain {{input}} and {{candidate}}",
                    self.name
                )));
            }
        }
        if self.examples.is_empty() {
            return Err(LabError::Validation(format!(
                "task {} has no examples",
                self.name
            )));
        }
        for (i, ex) in self.examples.iter().chain(&self.train_examples).enumerate() {
            if ex.candidates.len() < 2 {
                return Err(LabError::Validation(format!(
                    "task {} example {i} has fewer than 2 candidates",
                    self.name
                )));
            }
            if ex.gold >= ex.candidates.len() {
                return Err(LabError::Validation(format!(
                    "task {} example {i} gold index {} out of range",
                    self.name, ex.gold
                )));
            }
        }
        Ok(())
    }

    /// Chance level for random guessing; explicit value wins, otherwise the
    /// mean uniform-guess probability over examples.
    pub fn chance(&self) -> f64 {
        self.chance_level.unwrap_or_else(|| {
            let s: f64 = self
                .examples
                .iter()
                .map(|e| 1.0 / e.candidates.len() as f64)
                .sum();
            s / self.examples.len() as f64
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let task: EvalTask = serde_json::from_str(&text)?;
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Finetuning pairs: every train example rendered under every prompt
    /// with its gold candidate as the target.
    pub fn to_finetune_task(&self) -> Result<FinetuneTask> {
        let mut pairs = Vec::new();
        for ex in &self.train_examples {
            for prompt in &self.prompts {
                let (input, target) = render(prompt, ex, ex.gold)?;
                pairs.push(PromptedPair { input, target });
            }
        }
        Ok(FinetuneTask {
            name: self.name.clone(),
            pairs,
        })
    }
}

/// Renders one candidate under a template. The text before `{candidate}`
/// (with `{input}` substituted) is the conditioning input; the candidate
/// plus any trailing template text is the scored region.
pub fn render(template: &str, example: &EvalExample, candidate: usize) -> Result<(String, String)> {
    let filled = template.replace("{input}", &example.input);
    let Some((left, right)) = filled.split_once("{candidate}") else {
        return Err(LabError::Validation(format!(
            "template '{template}' lacks {{candidate}}"
        )));
    };
    let cand = &example.candidates[candidate];
    Ok((left.to_string(), format!("{cand}{right}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTaskKind {
    /// Predict the next symbol (3 choices).
    Next1,
    /// Predict the next two symbols (3 choices).
    Next2,
    /// Predict the symbol preceding the fragment (3 choices).
    Prev1,
    /// Predict the next three symbols (4 choices); the held-out task.
    Next3,
}

impl ToyTaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            ToyTaskKind::Next1 => "next1",
            ToyTaskKind::Next2 => "next2",
            ToyTaskKind::Prev1 => "prev1",
            ToyTaskKind::Next3 => "next3",
        }
    }

    fn n_choices(&self) -> usize {
        match self {
            ToyTaskKind::Next3 => 4,
            _ => 3,
        }
    }

    fn continuation_len(&self) -> usize {
        match self {
            ToyTaskKind::Next1 => 1,
            ToyTaskKind::Next2 => 2,
            ToyTaskKind::Prev1 => 1,
            ToyTaskKind::Next3 => 3,
        }
    }

    fn prompts(&self) -> Vec<String> {
        match self {
            ToyTaskKind::Prev1 => vec![
                "before {input} comes {candidate}".into(),
                "{input} is preceded by {candidate}".into(),
                "prior to {input}: {candidate}".into(),
            ],
            _ => vec![
                "{input} -> {candidate}".into(),
                "seq: {input} next: {candidate}".into(),
                "continue {input} with {candidate}".into(),
            ],
        }
    }
}

const TOY_STRIDES: &[usize] = &[1, 2, 3, 5];

fn toy_example(kind: ToyTaskKind, rng: &mut rand_chacha::ChaCha8Rng) -> EvalExample {
    let m = kind.continuation_len();
    let frag_len = rng.gen_range(5..=9);
    let start = rng.gen_range(0..PATTERN_ALPHABET.len());
    let stride = TOY_STRIDES[rng.gen_range(0..TOY_STRIDES.len())];
    // one extra symbol in front for Prev1
    let chars = pattern_chars(start, stride, 1 + frag_len + m);
    let (input, gold_text): (String, String) = match kind {
        ToyTaskKind::Prev1 => (
            String::from_utf8(chars[1..1 + frag_len].to_vec()).unwrap(),
            String::from_utf8(vec![chars[0]]).unwrap(),
        ),
        _ => (
            String::from_utf8(chars[1..1 + frag_len].to_vec()).unwrap(),
            String::from_utf8(chars[1 + frag_len..].to_vec()).unwrap(),
        ),
    };
    // distractors continue (or precede) with a wrong stride
    let mut candidates = vec![gold_text.clone()];
    let mut alt_strides: Vec<usize> = TOY_STRIDES.iter().copied().filter(|s| *s != stride).collect();
    alt_strides.shuffle(rng);
    for &alt in &alt_strides {
        if candidates.len() >= kind.n_choices() {
            break;
        }
        let text: String = match kind {
            ToyTaskKind::Prev1 => {
                let first = chars[1] as usize - b'a' as usize;
                let n = PATTERN_ALPHABET.len();
                let prev = PATTERN_ALPHABET[(first + n - alt % n) % n];
                String::from_utf8(vec![prev]).unwrap()
            }
            _ => {
                let last = chars[frag_len] as usize - b'a' as usize;
                let cont: Vec<u8> = (1..=m)
                    .map(|j| PATTERN_ALPHABET[(last + j * alt) % PATTERN_ALPHABET.len()])
                    .collect();
                String::from_utf8(cont).unwrap()
            }
        };
        if !candidates.contains(&text) {
            candidates.push(text);
        }
    }
    // top up with random strings if stride distractors collided
    while candidates.len() < kind.n_choices() {
        let text: String = (0..m)
            .map(|_| PATTERN_ALPHABET[rng.gen_range(0..PATTERN_ALPHABET.len())] as char)
            .collect();
        if !candidates.contains(&text) {
            candidates.push(text);
        }
    }
    let gold = rng.gen_range(0..candidates.len());
    candidates.swap(0, gold);
    EvalExample {
        input,
        candidates,
        gold,
    }
}

/// A synthetic prompted task over the pattern grammar.
pub fn toy_task(kind: ToyTaskKind, seed: u64, n_eval: usize, n_train: usize) -> EvalTask {
    let mut rng = substream(crate::rng::subseed(seed, kind.name(), 0), "toy-task", 0);
    let examples = (0..n_eval).map(|_| toy_example(kind, &mut rng)).collect();
    let train_examples = (0..n_train).map(|_| toy_example(kind, &mut rng)).collect();
    EvalTask {
        name: kind.name().into(),
        prompts: kind.prompts(),
        examples,
        chance_level: None,
        train_examples,
    }
}

/// The acceptance-run suite: three training tasks plus the held-out task.
pub fn toy_task_suite(seed: u64, n_eval: usize, n_train: usize) -> Vec<EvalTask> {
    vec![
        toy_task(ToyTaskKind::Next1, seed, n_eval, n_train),
        toy_task(ToyTaskKind::Next2, seed, n_eval, n_train),
        toy_task(ToyTaskKind::Prev1, seed, n_eval, n_train),
        toy_task(ToyTaskKind::Next3, seed, n_eval, n_train),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_splits_input_and_candidate() {
        let ex = EvalExample {
            input: "abc".into(),
            candidates: vec!["d".into(), "e".into()],
            gold: 0,
        };
        let (input, cand) = render("seq: {input} next: {candidate}", &ex, 1).unwrap();
        assert_eq!(input, "seq: abc next: ");
        assert_eq!(cand, "e");
        // trailing template text joins the scored region
        let (input, cand) = render("{input} [{candidate}]", &ex, 0).unwrap();
        assert_eq!(input, "abc [");
        assert_eq!(cand, "d]");
    }

    #[test]
    fn toy_tasks_validate_and_are_deterministic() {
        for kind in [
            ToyTaskKind::Next1,
            ToyTaskKind::Next2,
            ToyTaskKind::Prev1,
            ToyTaskKind::Next3,
        ] {
            let a = toy_task(kind, 3, 16, 8);
            let b = toy_task(kind, 3, 16, 8);
            assert_eq!(a, b);
            a.validate().unwrap();
            assert_eq!(a.examples.len(), 16);
            assert_eq!(a.train_examples.len(), 8);
            assert_eq!(a.prompts.len(), 3);
            for ex in &a.examples {
                assert_eq!(ex.candidates.len(), kind.n_choices());
                // candidates are distinct and gold is in range
                for i in 0..ex.candidates.len() {
                    for j in i + 1..ex.candidates.len() {
                        assert_ne!(ex.candidates[i], ex.candidates[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn toy_gold_is_the_true_continuation() {
        let task = toy_task(ToyTaskKind::Next1, 7, 32, 0);
        for ex in &task.examples {
            let bytes = ex.input.as_bytes();
            // infer stride from the first two symbols
            let n = PATTERN_ALPHABET.len();
            let stride = (bytes[1] as usize + n - bytes[0] as usize) % n;
            let last = ex.input.as_bytes()[bytes.len() - 1] as usize - b'a' as usize;
            let expected = PATTERN_ALPHABET[(last + stride) % n] as char;
            assert_eq!(ex.candidates[ex.gold], expected.to_string());
        }
    }

    #[test]
    fn task_file_round_trip() {
        let task = toy_task(ToyTaskKind::Next2, 5, 4, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        task.save(&path).unwrap();
        let loaded = EvalTask::load(&path).unwrap();
        assert_eq!(task, loaded);
    }

    #[test]
    fn finetune_pairs_render_all_prompts() {
        let task = toy_task(ToyTaskKind::Next1, 2, 4, 3);
        let ft = task.to_finetune_task().unwrap();
        assert_eq!(ft.pairs.len(), 3 * 3);
        assert!(ft.pairs[0].input.contains(&task.train_examples[0].input));
    }
}
