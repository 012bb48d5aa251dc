use r2dl::TaskKind;

/// Per-task sparse-coding settings and split sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskPreset {
    pub name: &'static str,
    pub kind: TaskKind,
    pub epsilon: f64,
    pub inner_iters: usize,
    pub train_size: usize,
    pub test_size: usize,
}

pub const PRESETS: [TaskPreset; 6] = [
    TaskPreset {
        name: "amp",
        kind: TaskKind::SequenceClassification,
        epsilon: 0.045,
        inner_iters: 10_000,
        train_size: 6489,
        test_size: 812,
    },
    TaskPreset {
        name: "toxicity",
        kind: TaskKind::SequenceClassification,
        epsilon: 0.045,
        inner_iters: 10_000,
        train_size: 8153,
        test_size: 1020,
    },
    TaskPreset {
        name: "secondary-structure",
        kind: TaskKind::TokenClassification,
        epsilon: 0.38,
        inner_iters: 9_000,
        train_size: 7416,
        test_size: 1854,
    },
    TaskPreset {
        name: "stability",
        kind: TaskKind::Regression,
        epsilon: 0.29,
        inner_iters: 6_000,
        train_size: 44_900,
        test_size: 11_226,
    },
    TaskPreset {
        name: "homology",
        kind: TaskKind::Regression,
        epsilon: 0.73,
        inner_iters: 4_000,
        train_size: 10_438,
        test_size: 2_610,
    },
    TaskPreset {
        name: "solubility",
        kind: TaskKind::SequenceClassification,
        epsilon: 0.42,
        inner_iters: 9_000,
        train_size: 35_100,
        test_size: 8_775,
    },
];

pub fn preset(name: &str) -> Option<&'static TaskPreset> {
    PRESETS.iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amp_preset() {
        let p = preset("amp").unwrap();
        assert_eq!((p.epsilon, p.inner_iters), (0.045, 10_000));
        assert_eq!((p.train_size, p.test_size), (6489, 812));
        assert!(preset("unknown").is_none());
    }
}
