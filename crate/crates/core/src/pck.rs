//! Percentage of correct keypoints.
//!
//! A joint is correct when its prediction lies within `gamma * L` pixels of
//! the truth (boundary inclusive). `L` is the longer bbox side, or the
//! left-shoulder to right-hip distance under torso normalization.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heatmap::JointSet;
use crate::synth::{LEFT_SHOULDER, RIGHT_HIP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Bbox,
    Torso,
}

impl FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbox" => Ok(Norm::Bbox),
            "torso" => Ok(Norm::Torso),
            other => Err(Error::Config(format!("unknown norm '{other}', expected bbox or torso"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Bbox => "bbox",
            Norm::Torso => "torso",
        })
    }
}

/// Which ground-truth joints are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    /// Joints flagged visible.
    Visible,
    /// Joints flagged invisible (masked but still annotated).
    Occluded,
    /// Every annotated joint.
    All,
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Subset::Visible),
            "occluded" => Ok(Subset::Occluded),
            "all" => Ok(Subset::All),
            other => Err(Error::Config(format!(
                "unknown subset '{other}', expected visible, occluded or all"
            ))),
        }
    }
}

impl Subset {
    fn includes(self, visible: bool) -> bool {
        match self {
            Subset::Visible => visible,
            Subset::Occluded => !visible,
            Subset::All => true,
        }
    }
}

/// A scored ground-truth frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameTruth<'a> {
    pub joints: &'a JointSet,
    pub bbox: [f32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointPck {
    pub joint: String,
    /// `None` when no frame scored this joint.
    pub pck: Option<f64>,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PckReport {
    pub norm: Norm,
    pub subset: Subset,
    pub gamma: f64,
    pub samples: usize,
    pub frames: usize,
    /// Unweighted mean of the defined per-joint values.
    pub mpck: Option<f64>,
    pub per_joint: Vec<JointPck>,
    /// Frames whose torso was degenerate and fell back to bbox norm.
    pub torso_fallbacks: usize,
}

impl PckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn mpck_or_zero(&self) -> f64 {
        self.mpck.unwrap_or(0.0)
    }
}

const DEGENERATE_TORSO: f64 = 1e-6;

fn distance(a: [f32; 2], b: [f32; 2]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    (dx * dx + dy * dy).sqrt()
}

fn bbox_scale(b: [f32; 4]) -> f64 {
    ((b[2] - b[0]) as f64).max((b[3] - b[1]) as f64)
}

/// Score predictions frame by frame. `samples` is only reported.
pub fn pck(
    predictions: &[JointSet],
    truths: &[FrameTruth<'_>],
    names: &[&str],
    gamma: f64,
    norm: Norm,
    subset: Subset,
    samples: usize,
) -> Result<PckReport> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames for {} annotated frames",
            predictions.len(),
            truths.len()
        )));
    }
    let k = names.len();
    let torso_ok = LEFT_SHOULDER < k && RIGHT_HIP < k;
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    let mut fallbacks = 0;
    for (pred, truth) in predictions.iter().zip(truths) {
        if pred.len() != k || truth.joints.len() != k {
            return Err(Error::Shape(format!(
                "joint count mismatch: {} predicted, {} annotated, {} named",
                pred.len(),
                truth.joints.len(),
                k
            )));
        }
        let scale = match norm {
            Norm::Bbox => bbox_scale(truth.bbox),
            Norm::Torso => {
                let torso = if torso_ok {
                    distance(truth.joints.coords[LEFT_SHOULDER], truth.joints.coords[RIGHT_HIP])
                } else {
                    0.0
                };
                if torso > DEGENERATE_TORSO {
                    torso
                } else {
                    fallbacks += 1;
                    bbox_scale(truth.bbox)
                }
            }
        };
        let threshold = gamma * scale;
        for j in 0..k {
            if !subset.includes(truth.joints.visible[j]) {
                continue;
            }
            total[j] += 1;
            if distance(pred.coords[j], truth.joints.coords[j]) <= threshold {
                correct[j] += 1;
            }
        }
    }
    let per_joint: Vec<JointPck> = names
        .iter()
        .enumerate()
        .map(|(j, name)| JointPck {
            joint: name.to_string(),
            pck: (total[j] > 0).then(|| correct[j] as f64 / total[j] as f64),
            correct: correct[j],
            total: total[j],
        })
        .collect();
    let defined: Vec<f64> = per_joint.iter().filter_map(|p| p.pck).collect();
    let mpck = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(PckReport {
        norm,
        subset,
        gamma,
        samples,
        frames: truths.len(),
        mpck,
        per_joint,
        torso_fallbacks: fallbacks,
    })
}

/// [`pck`] at each threshold, sorted by increasing gamma.
pub fn pck_sweep(
    predictions: &[JointSet],
    truths: &[FrameTruth<'_>],
    names: &[&str],
    gammas: &[f64],
    norm: Norm,
    subset: Subset,
    samples: usize,
) -> Result<Vec<PckReport>> {
    let mut g = gammas.to_vec();
    g.sort_by(|a, b| a.total_cmp(b));
    g.iter()
        .map(|&gamma| pck(predictions, truths, names, gamma, norm, subset, samples))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_uses_longer_bbox_side() {
        let truth = JointSet::all_visible(vec![[50.0, 50.0]]);
        let truths = [FrameTruth {
            joints: &truth,
            bbox: [0.0, 0.0, 100.0, 80.0],
        }];
        let at = |err: f32| {
            let p = JointSet::all_visible(vec![[50.0 + err, 50.0]]);
            pck(&[p], &truths, &["j"], 0.2, Norm::Bbox, Subset::Visible, 1)
                .unwrap()
                .mpck
                .unwrap()
        };
        assert_eq!(at(19.0), 1.0);
        assert_eq!(at(21.0), 0.0);
        assert_eq!(at(20.0), 1.0);
    }

    #[test]
    fn no_scored_joint_gives_undefined_values() {
        let truth = JointSet::new(vec![[1.0, 1.0]], vec![false]);
        let truths = [FrameTruth {
            joints: &truth,
            bbox: [0.0, 0.0, 10.0, 10.0],
        }];
        let r = pck(std::slice::from_ref(&truth), &truths, &["j"], 0.2, Norm::Bbox, Subset::Visible, 1).unwrap();
        assert_eq!(r.mpck, None);
        assert!(r.to_json().contains("\"mpck\":null"));
    }

    #[test]
    fn bad_gamma_and_lengths_are_errors() {
        let truth = JointSet::all_visible(vec![[1.0, 1.0]]);
        let truths = [FrameTruth {
            joints: &truth,
            bbox: [0.0, 0.0, 10.0, 10.0],
        }];
        assert!(pck(std::slice::from_ref(&truth), &truths, &["j"], 0.0, Norm::Bbox, Subset::All, 1).is_err());
        assert!(pck(&[], &truths, &["j"], 0.2, Norm::Bbox, Subset::All, 1).is_err());
    }
}
