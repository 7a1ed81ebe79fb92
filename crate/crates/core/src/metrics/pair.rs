use crate::error::{Error, Result};

/// A prediction in `[0, 1]` and its binary ground truth at the same resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub pred: Vec<f64>,
    pub gt: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl EvalPair {
    /// `gt` is binarized at 0.5.
    pub fn new(pred: Vec<f64>, gt: &[f32], height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if n == 0 || pred.len() != n || gt.len() != n {
            return Err(Error::Shape(format!(
                "eval pair needs {height}x{width} = {n} values, got pred {} and gt {}",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("prediction value {v} outside [0, 1]")));
        }
        Ok(Self { pred, gt: gt.iter().map(|&g| g >= 0.5).collect(), height, width })
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.gt.iter().filter(|&&g| g).count()
    }
}
