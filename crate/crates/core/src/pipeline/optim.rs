use std::collections::BTreeMap;

use super::TrainConfig;
use crate::nn::Module;

/// Learning-rate group, chosen from the parameter name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    Position,
    Offset,
    Scaling,
    Feature,
    Dynamics,
    Plane,
    Mlp,
    Rotation,
    Opacity,
    Color,
}

impl LrGroup {
    pub fn of(name: &str) -> Self {
        let leaf = name.rsplit('/').next().unwrap_or(name);
        if name.contains("planes/") {
            return Self::Plane;
        }
        if name.starts_with("anchors/") || name.starts_with("explicit/") {
            return match leaf {
                "positions" | "centers" => Self::Position,
                "offsets" => Self::Offset,
                "scaling" | "log_scales" => Self::Scaling,
                "features" => Self::Feature,
                "d_global" | "d_local" => Self::Dynamics,
                "quats" => Self::Rotation,
                "opacity" => Self::Opacity,
                "colors" => Self::Color,
                _ => Self::Mlp,
            };
        }
        Self::Mlp
    }

    pub fn base_rate(self, c: &TrainConfig) -> f64 {
        match self {
            Self::Position => c.lr_position,
            Self::Offset => c.lr_offset,
            Self::Scaling => c.lr_scaling,
            Self::Feature => c.lr_feature,
            Self::Dynamics => c.lr_dynamics,
            Self::Plane => c.lr_plane,
            Self::Mlp => c.lr_mlp,
            Self::Rotation => c.lr_rotation,
            Self::Opacity => c.lr_opacity,
            Self::Color => c.lr_color,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam with moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Updates every tensor carrying a gradient; `lr` maps names to rates.
    pub fn step(&mut self, module: &mut dyn Module, lr: &dyn Fn(&str) -> f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        module.visit_params_mut("", &mut |name, t| {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { return };
            let n = g.len();
            let mo = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            if mo.m.len() != n {
                // Shape changed without a matching resize; start over.
                *mo = Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                };
            }
            mo.t += 1;
            let c1 = 1.0 - b1.powi(mo.t as i32);
            let c2 = 1.0 - b2.powi(mo.t as i32);
            let rate = lr(name);
            let vals = t.values_mut();
            for i in 0..n {
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g[i];
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = mo.m[i] / c1;
                let vh = mo.v[i] / c2;
                vals[i] -= rate * mh / (vh.sqrt() + eps);
            }
        });
    }

    /// Drops moment rows of every tensor under `prefix`.
    pub fn retain_rows(&mut self, prefix: &str, keep: &[bool]) {
        if keep.is_empty() {
            return;
        }
        for (_, mo) in self.state.range_mut(prefix.to_string()..).take_while(|(k, _)| k.starts_with(prefix)) {
            let width = mo.m.len() / keep.len();
            let filter = |v: &[f64]| -> Vec<f64> {
                v.chunks(width.max(1))
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .flat_map(|(r, _)| r.iter().copied())
                    .collect()
            };
            mo.m = filter(&mo.m);
            mo.v = filter(&mo.v);
        }
    }

    /// Appends zero moment rows for `added` new rows of tensors under `prefix`
    /// that previously had `rows` rows.
    pub fn extend_rows(&mut self, prefix: &str, rows: usize, added: usize) {
        if rows == 0 {
            return;
        }
        for (_, mo) in self.state.range_mut(prefix.to_string()..).take_while(|(k, _)| k.starts_with(prefix)) {
            let width = mo.m.len() / rows;
            mo.m.resize(mo.m.len() + width * added, 0.0);
            mo.v.resize(mo.v.len() + width * added, 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    struct One(Tensor);
    impl Module for One {
        fn visit_params(&self, _: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            f("anchors/positions", &self.0);
        }
        fn visit_params_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("anchors/positions", &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_rate() {
        let mut p = One(Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap().into_param());
        p.0.set_grad(vec![3.0, -0.5]).unwrap();
        let mut opt = Adam::default();
        opt.step(&mut p, &|_| 0.1);
        assert!((p.0.values()[0] - 0.9).abs() < 1e-12);
        assert!((p.0.values()[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = One(Tensor::new(&[1, 1], vec![2.0]).unwrap().into_param());
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let x = p.0.values()[0];
            p.0.set_grad(vec![2.0 * (x - 0.5)]).unwrap();
            opt.step(&mut p, &|_| 0.01);
        }
        assert!((p.0.values()[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn row_bookkeeping() {
        let mut p = One(Tensor::zeros(&[3, 2]).into_param());
        p.0.set_grad(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut opt = Adam::default();
        opt.step(&mut p, &|_| 0.1);
        opt.retain_rows("anchors/", &[true, false, true]);
        let m = &opt.state["anchors/positions"].m;
        assert_eq!(m.len(), 4);
        assert!((m[2] - 0.5).abs() < 1e-12);
        opt.extend_rows("anchors/", 2, 1);
        assert_eq!(opt.state["anchors/positions"].v.len(), 6);
    }

    #[test]
    fn groups_from_names() {
        assert_eq!(LrGroup::of("anchors/positions"), LrGroup::Position);
        assert_eq!(LrGroup::of("anchors/d_local"), LrGroup::Dynamics);
        assert_eq!(LrGroup::of("gad/planes/s0/xy"), LrGroup::Plane);
        assert_eq!(LrGroup::of("attr/alpha/l0/weight"), LrGroup::Mlp);
        assert_eq!(LrGroup::of("explicit/quats"), LrGroup::Rotation);
    }
}
