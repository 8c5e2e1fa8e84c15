use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;
use serde::Serialize;

use super::{QaError, OPTION_COUNT};
use crate::graph::EntityIdx;
use crate::rng::SeededRng;
use crate::schema::EntityType;

const DISTRACTORS: usize = OPTION_COUNT - 1;

/// Keeps every label's rate as a correct answer close to its rate as a
/// distractor.
///
/// With `c` correct and `d` distractor appearances over `N` questions, a
/// label is balanced when `c/N ≈ d/(4N)`. Distractors are drawn without
/// replacement with weight `((4c + 1)/(d + 1))²`, and among several valid
/// answers the one with weight `(d + 1)/(4c + 1)` is preferred.
#[derive(Clone, Debug, Default)]
pub struct BalancedSampler {
    correct: BTreeMap<EntityIdx, u64>,
    wrong: BTreeMap<EntityIdx, u64>,
    questions: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ImbalanceReport {
    pub questions: u64,
    /// Largest `max(p_c, p_i)/min(p_c, p_i)` over labels that were correct at
    /// least once; infinite when such a label never served as a distractor.
    pub max_ratio: f64,
    pub worst_label: Option<u32>,
    pub labels_correct: usize,
    /// Labels that only ever appeared as distractors.
    pub never_correct: usize,
}

fn weighted_pick(weights: &[f64], rng: &mut SeededRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

impl BalancedSampler {
    fn counts(&self, e: EntityIdx) -> (f64, f64) {
        (
            self.correct.get(&e).copied().unwrap_or(0) as f64,
            self.wrong.get(&e).copied().unwrap_or(0) as f64,
        )
    }

    pub fn choose_correct(&mut self, answers: &[EntityIdx], rng: &mut SeededRng) -> EntityIdx {
        let weights: Vec<f64> = answers
            .iter()
            .map(|&a| {
                let (c, d) = self.counts(a);
                (d + 1.0) / (4.0 * c + 1.0)
            })
            .collect();
        let pick = answers[weighted_pick(&weights, rng)];
        *self.correct.entry(pick).or_default() += 1;
        self.questions += 1;
        pick
    }

    pub fn sample_distractors(
        &mut self,
        answer_type: EntityType,
        candidates: &[EntityIdx],
        rng: &mut SeededRng,
    ) -> Result<[EntityIdx; DISTRACTORS], QaError> {
        if candidates.len() < DISTRACTORS {
            return Err(QaError::InsufficientVocabulary {
                answer_type,
                available: candidates.len(),
            });
        }
        let mut pool = candidates.to_vec();
        let mut weights: Vec<f64> = pool
            .iter()
            .map(|&e| {
                let (c, d) = self.counts(e);
                let w = (4.0 * c + 1.0) / (d + 1.0);
                w * w
            })
            .collect();
        let mut out = [EntityIdx(0); DISTRACTORS];
        for slot in out.iter_mut() {
            let i = weighted_pick(&weights, rng);
            *slot = pool.swap_remove(i);
            weights.swap_remove(i);
            *self.wrong.entry(*slot).or_default() += 1;
        }
        Ok(out)
    }

    pub fn imbalance(&self) -> ImbalanceReport {
        let n = self.questions.max(1) as f64;
        let mut report = ImbalanceReport {
            questions: self.questions,
            ..Default::default()
        };
        for (&e, &c) in &self.correct {
            let d = self.wrong.get(&e).copied().unwrap_or(0) as f64;
            let pc = c as f64 / n;
            let pi = d / (DISTRACTORS as f64 * n);
            let ratio = if pi == 0.0 {
                f64::INFINITY
            } else {
                pc.max(pi) / pc.min(pi)
            };
            report.labels_correct += 1;
            if ratio > report.max_ratio {
                report.max_ratio = ratio;
                report.worst_label = Some(e.0);
            }
        }
        report.never_correct = self
            .wrong
            .keys()
            .filter(|e| !self.correct.contains_key(e))
            .count();
        report
    }
}
