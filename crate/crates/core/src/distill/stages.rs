use crate::error::{Error, Result};
use crate::models::LmConfig;
use serde::{Deserialize, Serialize};

/// Contiguous layer groups of teacher and student. Layer indices are
/// 0-based; a stage's feature is the residual stream after its last layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: usize,
    pub teacher: Vec<Vec<usize>>,
    pub student: Vec<Vec<usize>>,
}

impl StagePlan {
    pub fn teacher_feature_layers(&self) -> Vec<usize> {
        self.teacher.iter().map(|s| *s.last().unwrap()).collect()
    }

    pub fn student_feature_layers(&self) -> Vec<usize> {
        self.student.iter().map(|s| *s.last().unwrap()).collect()
    }
}

/// Splits `layers` into `stages` contiguous groups whose sizes differ by at
/// most one, the larger groups coming last.
pub fn split_layers(layers: usize, stages: usize) -> Result<Vec<Vec<usize>>> {
    if stages == 0 || stages > layers {
        return Err(Error::Config(format!(
            "cannot split {layers} layers into {stages} stages"
        )));
    }
    let base = layers / stages;
    let extra = layers % stages;
    let mut out = Vec::with_capacity(stages);
    let mut next = 0;
    for s in 0..stages {
        let size = base + usize::from(s >= stages - extra);
        out.push((next..next + size).collect());
        next += size;
    }
    Ok(out)
}

pub fn plan_stages(teacher: &LmConfig, student: &LmConfig, stages: usize) -> Result<StagePlan> {
    Ok(StagePlan {
        stages,
        teacher: split_layers(teacher.n_layers, stages)?,
        student: split_layers(student.n_layers, stages)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_layers(4, 4).unwrap(), vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(split_layers(3, 3).unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(split_layers(6, 3).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(split_layers(5, 3).unwrap(), vec![vec![0], vec![1, 2], vec![3, 4]]);
        assert!(split_layers(2, 3).is_err());
        assert!(split_layers(2, 0).is_err());
    }

    #[test]
    fn plan_rejects_too_many_stages() {
        let t = LmConfig::family("tinyA", 16, 8).unwrap();
        let s = LmConfig::family("base", 16, 8).unwrap();
        assert!(plan_stages(&t, &s, 3).is_err());
        let p = plan_stages(&t, &s, 2).unwrap();
        assert_eq!(p.teacher_feature_layers(), vec![0, 1]);
        assert_eq!(p.student_feature_layers(), vec![1, 3]);
    }
}
