use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{
    aggregate, answer, ground_ids, igp_answer, resolve_options, run, Aggregation, ProgramError,
    ProgramSet,
};
use crate::graph::KnowledgeGraph;
use crate::qa::{QaInstance, TemplateId};
use crate::real::Real;
use crate::train::{EmbeddingTable, KnowledgeModules};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kml,
    Igp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TemplateScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Accuracy over all questions and the mean of per-template accuracies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: Method,
    pub questions: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_template_accuracy: f64,
    pub per_template: BTreeMap<TemplateId, TemplateScore>,
    /// Questions answered by the index-0 fallback (no usable program, or no
    /// propagated mass for the baseline).
    pub fallbacks: usize,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    fn from_predictions(
        method: Method,
        qa: &[QaInstance],
        predictions: Vec<usize>,
        fallbacks: usize,
    ) -> Self {
        let mut per_template: BTreeMap<TemplateId, TemplateScore> = BTreeMap::new();
        let mut correct = 0;
        for (q, &p) in qa.iter().zip(&predictions) {
            let s = per_template.entry(q.tid).or_default();
            s.total += 1;
            if p == q.correct_index {
                s.correct += 1;
                correct += 1;
            }
        }
        for s in per_template.values_mut() {
            s.accuracy = s.correct as f64 / s.total as f64;
        }
        let mean_template_accuracy = if per_template.is_empty() {
            0.0
        } else {
            per_template.values().map(|s| s.accuracy).sum::<f64>() / per_template.len() as f64
        };
        EvalReport {
            method,
            questions: qa.len(),
            correct,
            accuracy: if qa.is_empty() {
                0.0
            } else {
                correct as f64 / qa.len() as f64
            },
            mean_template_accuracy,
            per_template,
            fallbacks,
            predictions,
        }
    }
}

/// Answers every question by executing its programs on the grounding and
/// scoring the options.
pub fn evaluate_kml<T: Real>(
    qa: &[QaInstance],
    kg: &KnowledgeGraph,
    modules: &KnowledgeModules<T>,
    embeddings: &EmbeddingTable<T>,
    programs: &ProgramSet,
    aggregation: Aggregation,
    sidecar: Option<&BTreeMap<String, Vec<T>>>,
) -> Result<EvalReport, ProgramError> {
    let mut predictions = Vec::with_capacity(qa.len());
    let mut fallbacks = 0;
    for q in qa {
        let z_i = ground_ids(&q.grounding, kg, embeddings)?;
        let options = resolve_options(&q.options, kg, embeddings, sidecar)?;
        let mut per_program = Vec::new();
        for p in programs.programs_for(q)? {
            match run(&p, &z_i, modules) {
                Ok(z_f) => per_program.push(answer(&z_f, &options)),
                Err(ProgramError::Nn(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if per_program.is_empty() {
            fallbacks += 1;
            predictions.push(0);
        } else {
            predictions.push(aggregate(&per_program, aggregation).index);
        }
    }
    Ok(EvalReport::from_predictions(
        Method::Kml,
        qa,
        predictions,
        fallbacks,
    ))
}

/// Graph-propagation baseline over the same questions and programs.
pub fn evaluate_igp(
    qa: &[QaInstance],
    kg: &KnowledgeGraph,
    programs: &ProgramSet,
) -> Result<EvalReport, ProgramError> {
    let mut predictions = Vec::with_capacity(qa.len());
    let mut fallbacks = 0;
    for q in qa {
        let grounding = q
            .grounding
            .categories
            .iter()
            .zip(&q.grounding.scores)
            .map(|(c, &s)| {
                kg.idx(c)
                    .map(|e| (e, s))
                    .map_err(|_| ProgramError::UnknownCategory(c.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let options = q
            .options
            .iter()
            .map(|o| {
                kg.idx(o)
                    .map_err(|_| ProgramError::MissingOptionEmbedding(o.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let a = igp_answer(&grounding, &programs.programs_for(q)?, kg, &options)?;
        fallbacks += a.empty as usize;
        predictions.push(a.index);
    }
    Ok(EvalReport::from_predictions(
        Method::Igp,
        qa,
        predictions,
        fallbacks,
    ))
}

/// Dispatches on `method`; the baseline ignores modules and embeddings.
pub fn evaluate<T: Real>(
    method: Method,
    qa: &[QaInstance],
    kg: &KnowledgeGraph,
    modules: &KnowledgeModules<T>,
    embeddings: &EmbeddingTable<T>,
    programs: &ProgramSet,
    aggregation: Aggregation,
) -> Result<EvalReport, ProgramError> {
    match method {
        Method::Kml => evaluate_kml(qa, kg, modules, embeddings, programs, aggregation, None),
        Method::Igp => evaluate_igp(qa, kg, programs),
    }
}
