use super::{Network, ParamId, ParamKind, Site};

/// A parameter subset whose joint scaling by `α > 0` scales the logits by
/// `α` (in a bias-free, normalization-free network).
#[derive(Clone, Debug, PartialEq)]
pub struct PhSet {
    pub label: String,
    pub members: Vec<ParamId>,
    /// Set when the network has nonzero biases or BatchNorm, in which case
    /// the scaling property does not hold.
    pub warning: Option<String>,
}

impl PhSet {
    /// L2 norm of all member values taken together.
    pub fn norm(&self, net: &Network) -> f64 {
        self.members.iter().fold(0.0, |acc, &id| acc + net.param(id).value.sum_sq()).sqrt()
    }
}

impl Network {
    /// The stem weight, the classifier weight, and for every projected block
    /// the union of its projection weight and its first branch weight.
    pub fn ph_sets(&self) -> Vec<PhSet> {
        let warning = self
            .has_active_biases()
            .then(|| "network has nonzero biases or normalization; sets are not positively homogeneous".to_string());
        let find = |pred: &dyn Fn(Site) -> bool| -> Vec<ParamId> {
            self.param_ids()
                .filter(|&id| self.param(id).tags.kind == ParamKind::Weight && pred(self.param(id).tags.site))
                .collect()
        };
        let mut sets = vec![PhSet { label: "stem".into(), members: find(&|s| s == Site::Stem), warning: warning.clone() }];
        for (l, block) in self.blocks.iter().enumerate() {
            if !block.projected {
                continue;
            }
            let mut members = find(&|s| s == Site::Shortcut { block: l });
            members.push(self.branch_weights(l)[0]);
            sets.push(PhSet { label: format!("block{}.proj+w1", l + 1), members, warning: warning.clone() });
        }
        sets.push(PhSet {
            label: "classifier".into(),
            members: find(&|s| s == Site::Classifier),
            warning,
        });
        sets
    }

    /// Multiplies every listed parameter by `alpha`.
    pub fn scale_params(&mut self, ids: &[ParamId], alpha: f64) {
        for &id in ids {
            self.param_mut(id).value.scale_in_place(alpha);
        }
    }
}
