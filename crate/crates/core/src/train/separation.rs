use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::Serialize;

use super::{EmbeddingTable, KnowledgeModules};
use crate::graph::KnowledgeGraph;
use crate::nn::NnError;
use crate::real::Real;
use crate::schema::RelationId;

/// Slack for floating-point comparisons in the per-record checks.
const CHECK_TOL: f64 = 1e-9;
const MASS_REL_TOL: f64 = 1e-6;

/// Loss, margin and the derived inequalities for one `(head, relation)`.
/// Masses and the primary loss use unit temperature.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparationRecord {
    pub head: String,
    pub relation: RelationId,
    pub n_positive: usize,
    pub loss: f64,
    pub loss_at_tau: f64,
    /// `min_y s(ẑ, y) − max_u s(ẑ, u)`; absent when every entity is a positive.
    pub margin: Option<f64>,
    /// `log(1 + 1/|Y|)`.
    pub bound: f64,
    pub mass_positive: f64,
    pub mass_negative: f64,
    pub min_positive: f64,
    pub max_negative: Option<f64>,
    pub mass_bound_holds: bool,
    pub min_positive_bound_holds: bool,
    pub max_negative_bound_holds: bool,
}

impl SeparationRecord {
    pub fn separated(&self) -> bool {
        self.margin.map_or(true, |m| m > 0.0)
    }

    pub fn below_bound(&self) -> bool {
        self.loss < self.bound
    }

    pub fn below_bound_at_tau(&self) -> bool {
        self.loss_at_tau < self.bound
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SeparationSummary {
    pub records: usize,
    pub separated: usize,
    pub below_bound: usize,
    /// Records below the bound that are not separated (unit temperature).
    pub implication_exceptions: usize,
    pub below_bound_at_tau: usize,
    pub implication_exceptions_at_tau: usize,
    pub mass_bound_violations: usize,
    pub min_positive_bound_violations: usize,
    pub max_negative_bound_violations: usize,
    /// Records whose positive-set lower bound holds once stated against the
    /// largest positive score instead of the smallest.
    pub max_positive_bound_violations: usize,
    pub skipped_degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparationReport {
    pub tau: f64,
    pub summary: SeparationSummary,
    pub records: Vec<SeparationRecord>,
}

/// One record per relation and head with a non-empty tail set, computed in
/// double precision.
pub fn separation_report<T: Real>(
    modules: &KnowledgeModules<T>,
    embeddings: &EmbeddingTable<T>,
    kg: &KnowledgeGraph,
    tau: f64,
) -> SeparationReport {
    let emb = embeddings.cast::<f64>();
    let mut summary = SeparationSummary::default();
    let mut records = Vec::new();
    let mut positive = alloc::vec![false; kg.len()];
    for (rel, module) in modules.iter() {
        let module = module.cast::<f64>();
        for head in kg.heads(rel) {
            let z_hat = match module.forward(emb.unit(head)) {
                Ok(o) => o.z_hat,
                Err(NnError::DegenerateOutput(_)) => {
                    summary.skipped_degenerate += 1;
                    continue;
                }
                Err(_) => continue,
            };
            let s = emb.scores(&z_hat);
            positive.iter_mut().for_each(|p| *p = false);
            let mut n_positive = 0;
            for t in kg.tails(head, rel) {
                positive[t.index()] = true;
                n_positive += 1;
            }

            let (mut a, mut c) = (0.0, 0.0);
            let (mut min_pos, mut max_pos) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut max_neg: Option<f64> = None;
            for (i, &si) in s.iter().enumerate() {
                if positive[i] {
                    a += si.exp();
                    min_pos = min_pos.min(si);
                    max_pos = max_pos.max(si);
                } else {
                    c += si.exp();
                    max_neg = Some(max_neg.map_or(si, |m: f64| m.max(si)));
                }
            }
            let loss = (a + c).ln() - a.ln();
            let scaled: Vec<f64> = s.iter().map(|x| x / tau).collect();
            let loss_at_tau = super::multi_positive_loss(&scaled, &positive);
            let bound = (1.0 + 1.0 / n_positive as f64).ln();
            let log_a_per = a.ln() - (n_positive as f64).ln();
            let rec = SeparationRecord {
                head: kg.id(head).into(),
                relation: rel,
                n_positive,
                loss,
                loss_at_tau,
                margin: max_neg.map(|m| min_pos - m),
                bound,
                mass_positive: a,
                mass_negative: c,
                min_positive: min_pos,
                max_negative: max_neg,
                mass_bound_holds: c <= loss.exp_m1() * a * (1.0 + MASS_REL_TOL) + f64::MIN_POSITIVE,
                min_positive_bound_holds: min_pos >= log_a_per - CHECK_TOL,
                max_negative_bound_holds: max_neg.map_or(true, |m| m <= c.ln() + CHECK_TOL),
            };

            summary.records += 1;
            summary.separated += rec.separated() as usize;
            summary.below_bound += rec.below_bound() as usize;
            summary.implication_exceptions += (rec.below_bound() && !rec.separated()) as usize;
            summary.below_bound_at_tau += rec.below_bound_at_tau() as usize;
            summary.implication_exceptions_at_tau +=
                (rec.below_bound_at_tau() && !rec.separated()) as usize;
            summary.mass_bound_violations += !rec.mass_bound_holds as usize;
            summary.min_positive_bound_violations += !rec.min_positive_bound_holds as usize;
            summary.max_negative_bound_violations += !rec.max_negative_bound_holds as usize;
            summary.max_positive_bound_violations += (max_pos < log_a_per - CHECK_TOL) as usize;
            records.push(rec);
        }
    }
    SeparationReport {
        tau,
        summary,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixture::toy;
    use crate::train::{train, TrainConfig};

    #[test]
    fn untrained_modules_still_report() {
        let kg = toy();
        let config = TrainConfig {
            dim: 16,
            hidden: 8,
            epochs: 0,
            ..TrainConfig::default()
        };
        let t = train::<f32>(&kg, &config, None).unwrap();
        let report = separation_report(&t.modules, &t.embeddings, &kg, 0.07);
        let expected: usize = RelationId::all().map(|r| kg.heads(r).count()).sum();
        assert_eq!(report.records.len(), expected);
        for r in &report.records {
            assert!(r.bound > 0.0);
            let m = r.margin.unwrap();
            assert!((-2.0..=2.0).contains(&m));
            if r.n_positive == 1 {
                assert!((r.bound - 2f64.ln()).abs() < 1e-15);
            }
            assert!(r.mass_bound_holds && r.max_negative_bound_holds);
        }
        assert_eq!(report.summary.max_positive_bound_violations, 0);
    }

    #[test]
    fn single_positive_records_satisfy_extreme_bounds() {
        let kg = toy();
        let config = TrainConfig {
            dim: 16,
            hidden: 8,
            epochs: 5,
            ..TrainConfig::default()
        };
        let t = train::<f64>(&kg, &config, None).unwrap();
        let report = separation_report(&t.modules, &t.embeddings, &kg, 0.07);
        for r in report.records.iter().filter(|r| r.n_positive == 1) {
            assert!(r.min_positive_bound_holds, "{r:?}");
        }
    }

    #[test]
    fn loss_bound_does_not_force_margin_with_two_positives() {
        // Scores are free reals here: one strong positive hides a weak one.
        let s = [10.0f64, 0.0, 1.0];
        let pos = [true, true, false];
        let loss = crate::train::multi_positive_loss(&s, &pos);
        assert!(loss < (1.0f64 + 0.5).ln());
        assert!(s[1] - s[2] < 0.0);
    }
}
