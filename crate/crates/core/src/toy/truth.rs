//! Ground-truth store with an access canary.
//!
//! Labels are read through [`GroundTruthStore::for_training`] while
//! fitting and through [`GroundTruthStore::for_scoring`] once predictions
//! exist. Any label read while the store is in the inference phase is
//! counted, so a leak shows up as a non-zero `inference_reads`.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::toy::scene::SceneTruth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
    Scoring,
}

#[derive(Debug)]
pub struct GroundTruthStore {
    truths: Vec<SceneTruth>,
    phase: Phase,
    training_reads: AtomicUsize,
    inference_reads: AtomicUsize,
    scoring_reads: AtomicUsize,
}

impl GroundTruthStore {
    pub fn new(truths: Vec<SceneTruth>) -> Self {
        GroundTruthStore {
            truths,
            phase: Phase::Training,
            training_reads: AtomicUsize::new(0),
            inference_reads: AtomicUsize::new(0),
            scoring_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    fn read(&self, scene: usize, counter: &AtomicUsize) -> Result<&SceneTruth> {
        counter.fetch_add(1, Ordering::Relaxed);
        self.truths
            .get(scene)
            .ok_or_else(|| Error::Value(format!("no ground truth for scene {scene}")))
    }

    /// Label access for loss computation and train-time pre-masking.
    pub fn for_training(&self, scene: usize) -> Result<&SceneTruth> {
        let counter = match self.phase {
            Phase::Training => &self.training_reads,
            _ => &self.inference_reads,
        };
        self.read(scene, counter)
    }

    /// Label access for metrics, after predictions are fixed.
    pub fn for_scoring(&self, scene: usize) -> Result<&SceneTruth> {
        if self.phase == Phase::Inference {
            self.inference_reads.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Contract(
                "scoring labels requested before inference finished".into(),
            ));
        }
        let counter = match self.phase {
            Phase::Scoring => &self.scoring_reads,
            _ => &self.training_reads,
        };
        self.read(scene, counter)
    }

    pub fn training_reads(&self) -> usize {
        self.training_reads.load(Ordering::Relaxed)
    }

    /// Label reads made while predictions were being produced.
    pub fn inference_reads(&self) -> usize {
        self.inference_reads.load(Ordering::Relaxed)
    }

    pub fn scoring_reads(&self) -> usize {
        self.scoring_reads.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::scene::{gen_scene, SceneConfig};

    fn store() -> GroundTruthStore {
        let sc = gen_scene(0, &SceneConfig::default()).unwrap();
        GroundTruthStore::new(vec![sc.split().1])
    }

    #[test]
    fn counters_follow_phase() {
        let mut s = store();
        s.for_training(0).unwrap();
        assert_eq!((s.training_reads(), s.inference_reads()), (1, 0));
        s.set_phase(Phase::Inference);
        assert!(s.for_scoring(0).is_err());
        s.for_training(0).unwrap();
        assert_eq!(s.inference_reads(), 2);
        s.set_phase(Phase::Scoring);
        s.for_scoring(0).unwrap();
        assert_eq!(s.scoring_reads(), 1);
    }

    #[test]
    fn out_of_range() {
        assert!(store().for_training(3).is_err());
    }
}
