//! Scoring a trained model on prepared examples, with per-scenario accuracy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::record::{ClipRecord, Scene, TimeOfDay, Weather};
use crate::error::{ensure, Error, Result};
use crate::model::{classify, ModelParams, DISTRACTED};
use crate::train::data::{target_of, Example};
use crate::train::metrics::MetricsReport;
use crate::train::reference;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub target: usize,
    /// Probability of the distracted class.
    pub score: f64,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        usize::from(self.score >= 0.5) == self.target
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scenarios: ScenarioBreakdown,
    pub predictions: Vec<Prediction>,
}

pub fn predict(params: &ModelParams<f32>, examples: &[Example]) -> Result<Vec<Prediction>> {
    examples
        .par_iter()
        .map(|ex| {
            let (probs, _) = classify(params, &ex.clip)?;
            Ok(Prediction {
                clip_id: ex.record.clip_id.clone(),
                target: ex.target,
                score: probs[DISTRACTED] as f64,
            })
        })
        .collect()
}

pub fn evaluate(params: &ModelParams<f32>, examples: &[Example]) -> Result<Evaluation> {
    let predictions = predict(params, examples)?;
    let targets: Vec<usize> = predictions.iter().map(|p| p.target).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let records: Vec<ClipRecord> = examples.iter().map(|e| e.record.clone()).collect();
    Ok(Evaluation {
        report: MetricsReport::from_scores(&targets, &scores)?,
        scenarios: scenario_breakdown(&predictions, &records)?,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGroup {
    pub tag: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Full-scale `(clips, accuracy %)` for this tag.
    pub reference: (usize, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAxis {
    pub axis: String,
    pub groups: Vec<ScenarioGroup>,
    /// Tags with no evaluated clip.
    pub omitted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBreakdown {
    pub axes: Vec<ScenarioAxis>,
}

fn axis<T: Copy + PartialEq + std::fmt::Display>(
    name: &str,
    values: &[T],
    tag_of: impl Fn(&ClipRecord) -> T,
    reference: impl Fn(T) -> (usize, f64),
    outcomes: &[(&ClipRecord, bool)],
) -> ScenarioAxis {
    let mut groups = Vec::new();
    let mut omitted = Vec::new();
    for &value in values {
        let members: Vec<bool> = outcomes
            .iter()
            .filter(|(r, _)| tag_of(r) == value)
            .map(|(_, ok)| *ok)
            .collect();
        if members.is_empty() {
            omitted.push(value.to_string());
            continue;
        }
        let correct = members.iter().filter(|&&ok| ok).count();
        groups.push(ScenarioGroup {
            tag: value.to_string(),
            count: members.len(),
            correct,
            accuracy: correct as f64 / members.len() as f64,
            reference: reference(value),
        });
    }
    ScenarioAxis {
        axis: name.to_string(),
        groups,
        omitted,
    }
}

/// Accuracy per scene, time of day and weather over the predicted clips.
pub fn scenario_breakdown(predictions: &[Prediction], records: &[ClipRecord]) -> Result<ScenarioBreakdown> {
    let by_id: std::collections::HashMap<&str, &ClipRecord> =
        records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let outcomes = predictions
        .iter()
        .map(|p| {
            let record = *by_id.get(p.clip_id.as_str()).ok_or_else(|| {
                Error::Validation(format!("no record for predicted clip {}", p.clip_id))
            })?;
            ensure!(
                target_of(record)? == p.target,
                "prediction target disagrees with the label of {}",
                p.clip_id
            );
            Ok((record, p.correct()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioBreakdown {
        axes: vec![
            axis("scene", Scene::ALL, |r| r.scene, reference::scene_accuracy, &outcomes),
            axis("time_of_day", TimeOfDay::ALL, |r| r.time_of_day, reference::time_accuracy, &outcomes),
            axis("weather", Weather::ALL, |r| r.weather, reference::weather_accuracy, &outcomes),
        ],
    })
}
