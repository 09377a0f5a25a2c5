//! Class, instance and common-knowledge experts replacing the decoder
//! feed-forward block, plus the plain feed-forward and sparse top-2
//! mixture baselines they are ablated against.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, SelfAttention};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fixed weight of each active expert in the CLICK sum.
pub const MIX_WEIGHT: f64 = 1.0 / 3.0;

/// Which CLICK experts are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertSet {
    pub common: bool,
    pub class: bool,
    pub instance: bool,
}

impl ExpertSet {
    pub const ALL: Self = Self {
        common: true,
        class: true,
        instance: true,
    };
    pub const COMMON_ONLY: Self = Self {
        common: true,
        class: false,
        instance: false,
    };
}

/// Refinement block used after cross-attention in every decoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ExpertMode {
    Click(ExpertSet),
    /// `q + FFN(q)`.
    Ffn,
    /// Router over this many feed-forward experts, top-2 active.
    Sparse(usize),
}

impl Default for ExpertMode {
    fn default() -> Self {
        ExpertMode::Click(ExpertSet::ALL)
    }
}

impl FromStr for ExpertMode {
    type Err = Error;

    /// Accepts `click`, `ffn`, `moe<E>`, or a `+`-joined subset of
    /// `ck`, `class`, `inst`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "click" => return Ok(ExpertMode::Click(ExpertSet::ALL)),
            "ffn" => return Ok(ExpertMode::Ffn),
            _ => {}
        }
        if let Some(n) = s.strip_prefix("moe") {
            let e: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad expert count in `{s}`")))?;
            if e < 2 {
                return Err(Error::TooFewExperts(e));
            }
            return Ok(ExpertMode::Sparse(e));
        }
        let mut set = ExpertSet {
            common: false,
            class: false,
            instance: false,
        };
        for part in s.split('+') {
            match part {
                "ck" | "common" => set.common = true,
                "class" | "cls" => set.class = true,
                "inst" | "instance" => set.instance = true,
                _ => return Err(Error::Config(format!("unknown expert mode `{s}`"))),
            }
        }
        Ok(ExpertMode::Click(set))
    }
}

impl fmt::Display for ExpertMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertMode::Click(set) if *set == ExpertSet::ALL => f.write_str("click"),
            ExpertMode::Click(set) => {
                let mut parts = Vec::new();
                if set.common {
                    parts.push("ck");
                }
                if set.class {
                    parts.push("class");
                }
                if set.instance {
                    parts.push("inst");
                }
                f.write_str(&parts.join("+"))
            }
            ExpertMode::Ffn => f.write_str("ffn"),
            ExpertMode::Sparse(e) => write!(f, "moe{e}"),
        }
    }
}

impl From<ExpertMode> for String {
    fn from(m: ExpertMode) -> Self {
        m.to_string()
    }
}

impl TryFrom<String> for ExpertMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Shared learnable slot, self-attention and projection to per-query
/// `(scale, bias)`.
#[derive(Clone, Debug)]
pub struct InstanceGenerator {
    pub base: ParamId,
    pub attention: SelfAttention,
    pub norm: LayerNorm,
    pub proj: Linear,
    pub dim: usize,
}

/// Graph handles of generated per-query diagonal affine maps, `[Q, d]` each.
#[derive(Clone, Copy, Debug)]
pub struct InstanceParamVars {
    pub scale: Var,
    pub bias: Var,
}

/// Plain-value form of one query's generated affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceParams {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl InstanceGenerator {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            base: pb.uniform("base", 1, dim, 1.0),
            attention: SelfAttention::new(&mut pb.sub("attention"), dim, heads)?,
            norm: LayerNorm::new(&mut pb.sub("norm"), dim),
            proj: Linear::new(&mut pb.sub("proj"), dim, 2 * dim),
            dim,
        })
    }

    /// `mask` covers the queries only; the base slot is appended as a key
    /// every query sees and its own output row is dropped.
    pub fn generate(&self, g: &mut Graph<'_>, contents: Var, mask: Option<&AttentionMask>) -> InstanceParamVars {
        let q = g.shape(contents).0;
        let base = g.param(self.base);
        let x = g.concat_rows(&[contents, base]);
        let full = mask.map(|m| m.with_extra_columns(1).with_extra_rows(1));
        let a = self.attention.forward(g, x, None, full.as_ref());
        let h = g.add(x, a);
        let h = self.norm.forward(g, h);
        let h = g.slice_rows(h, 0, q);
        let p = self.proj.forward(g, h);
        InstanceParamVars {
            scale: g.slice_cols(p, 0, self.dim),
            bias: g.slice_cols(p, self.dim, self.dim),
        }
    }
}

/// Data-level wrapper around [`InstanceGenerator::generate`].
pub fn generate_instance_params(
    store: &ParamStore,
    generator: &InstanceGenerator,
    contents: &Tensor,
    mask: Option<&AttentionMask>,
) -> Vec<InstanceParams> {
    let mut g = Graph::with_params(store);
    let c = g.constant(contents.clone());
    let vars = generator.generate(&mut g, c, mask);
    let (s, b) = (g.value(vars.scale), g.value(vars.bias));
    (0..contents.rows())
        .map(|i| InstanceParams {
            scale: s.row(i).to_vec(),
            bias: b.row(i).to_vec(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SparseMoe {
    pub router: Linear,
    pub experts: Vec<FeedForward>,
}

impl SparseMoe {
    pub const TOP_K: usize = 2;

    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize, experts: usize) -> Result<Self> {
        if experts < 2 {
            return Err(Error::TooFewExperts(experts));
        }
        Ok(Self {
            router: Linear::new(&mut pb.sub("router"), dim, experts),
            experts: (0..experts)
                .map(|e| FeedForward::new(&mut pb.sub("experts").sub(e), dim, hidden))
                .collect(),
        })
    }

    /// Renormalized top-2 routing weights `[Q, E]`; unselected entries are 0.
    pub fn routing(&self, g: &mut Graph<'_>, q: Var) -> Var {
        let logits = self.router.forward(g, q);
        let (rows, e) = g.shape(logits);
        let mut mask = Tensor::zeros(rows, e);
        for r in 0..rows {
            let row = g.value(logits).row(r);
            let mut order: Vec<usize> = (0..e).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &j in &order[Self::TOP_K..] {
                mask.set(r, j, -1e30);
            }
        }
        let mask = g.constant(mask);
        let masked = g.add(logits, mask);
        g.softmax(masked, e)
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: Var) -> Var {
        let weights = self.routing(g, q);
        let rows = g.shape(q).0;
        let mut acc = q;
        for (e, expert) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..rows).filter(|&r| g.value(weights).get(r, e) > 0.0).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = g.gather_rows(q, &idx);
            let y = expert.forward(g, sub);
            let col = g.slice_cols(weights, e, 1);
            let w = g.gather_rows(col, &idx);
            let y = g.mul(y, w);
            let y = g.scatter_rows(y, &idx, rows);
            acc = g.add(acc, y);
        }
        acc
    }
}

/// Parameters of the decoder refinement block for one stage.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub mode: ExpertMode,
    pub num_classes: usize,
    pub common: Option<FeedForward>,
    pub class_experts: Vec<FeedForward>,
    pub instance: Option<InstanceGenerator>,
    pub sparse: Option<SparseMoe>,
}

impl ExpertBank {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        mode: ExpertMode,
        dim: usize,
        hidden: usize,
        num_classes: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut bank = Self {
            mode,
            num_classes,
            common: None,
            class_experts: Vec::new(),
            instance: None,
            sparse: None,
        };
        match mode {
            ExpertMode::Click(set) => {
                if !(set.common || set.class || set.instance) {
                    return Err(Error::Config("at least one CLICK expert must be active".into()));
                }
                if set.common {
                    bank.common = Some(FeedForward::new(&mut pb.sub("common"), dim, hidden));
                }
                if set.class {
                    bank.class_experts = (0..num_classes)
                        .map(|c| FeedForward::new(&mut pb.sub("class").sub(c), dim, hidden))
                        .collect();
                }
                if set.instance {
                    bank.instance = Some(InstanceGenerator::new(&mut pb.sub("instance"), dim, heads)?);
                }
            }
            ExpertMode::Ffn => bank.common = Some(FeedForward::new(&mut pb.sub("common"), dim, hidden)),
            ExpertMode::Sparse(e) => bank.sparse = Some(SparseMoe::new(&mut pb.sub("sparse"), dim, hidden, e)?),
        }
        Ok(bank)
    }

    /// `(W_instance, W_class, W_gen)`.
    pub fn mixing_weights(&self) -> [f64; 3] {
        [MIX_WEIGHT; 3]
    }

    /// Refines `q [Q, d]`; `mask` restricts the instance generator's
    /// attention (normally the group mask).
    pub fn forward(&self, g: &mut Graph<'_>, q: Var, categories: &[usize], mask: Option<&AttentionMask>) -> Result<Var> {
        let rows = g.shape(q).0;
        if categories.len() != rows {
            return Err(Error::Config(format!(
                "{} categories for {rows} queries",
                categories.len()
            )));
        }
        if let Some(&c) = categories.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::CategoryOutOfRange {
                index: c,
                count: self.num_classes,
            });
        }
        if rows == 0 {
            return Ok(q);
        }
        match self.mode {
            ExpertMode::Ffn => {
                let f = self.common.as_ref().expect("ffn bank has a common expert");
                let y = f.forward(g, q);
                Ok(g.add(q, y))
            }
            ExpertMode::Sparse(_) => Ok(self.sparse.as_ref().expect("sparse bank").forward(g, q)),
            ExpertMode::Click(_) => {
                let mut terms = Vec::new();
                if let Some(f) = &self.common {
                    terms.push(f.forward(g, q));
                }
                if !self.class_experts.is_empty() {
                    let mut class_out: Option<Var> = None;
                    for (c, expert) in self.class_experts.iter().enumerate() {
                        let idx: Vec<usize> = (0..rows).filter(|&r| categories[r] == c).collect();
                        if idx.is_empty() {
                            continue;
                        }
                        let sub = g.gather_rows(q, &idx);
                        let y = expert.forward(g, sub);
                        let y = g.scatter_rows(y, &idx, rows);
                        class_out = Some(match class_out {
                            Some(acc) => g.add(acc, y),
                            None => y,
                        });
                    }
                    terms.extend(class_out);
                }
                if let Some(generator) = &self.instance {
                    let p = generator.generate(g, q, mask);
                    let sq = g.mul(p.scale, q);
                    terms.push(g.add(sq, p.bias));
                }
                let mut sum = terms[0];
                for &t in &terms[1..] {
                    sum = g.add(sum, t);
                }
                let sum = g.scale(sum, MIX_WEIGHT);
                Ok(g.add(q, sum))
            }
        }
    }
}

/// Data-level CLICK forward for a batch of queries.
pub fn click_moe_forward(
    store: &ParamStore,
    bank: &ExpertBank,
    q: &Tensor,
    categories: &[usize],
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    let x = g.constant(q.clone());
    let y = bank.forward(&mut g, x, categories, mask)?;
    Ok(g.value(y).clone())
}

/// Data-level sparse mixture forward.
pub fn sparse_moe_forward(store: &ParamStore, moe: &SparseMoe, q: &Tensor) -> Tensor {
    let mut g = Graph::with_params(store);
    let x = g.constant(q.clone());
    let y = moe.forward(&mut g, x);
    g.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{param_grad_report, random_tensor};
    use crate::params::derived_rng;
    use proptest::prelude::*;

    const D: usize = 8;

    fn bank(store: &mut ParamStore, mode: ExpertMode, classes: usize) -> ExpertBank {
        ExpertBank::new(&mut ParamBuilder::new(store, 5).sub("moe"), mode, D, 2 * D, classes, 2).unwrap()
    }

    fn zero(store: &mut ParamStore, lin: &Linear) {
        let w = store.get_mut(lin.weight);
        *w = Tensor::zeros(w.rows(), w.cols());
        if let Some(b) = lin.bias {
            let t = store.get_mut(b);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    #[test]
    fn mode_tags_round_trip() {
        for tag in ["click", "ffn", "moe3", "moe5", "moe8", "ck", "ck+class", "ck+inst", "class"] {
            let m: ExpertMode = tag.parse().unwrap();
            assert_eq!(m.to_string(), tag);
        }
        assert_eq!("ck+class+inst".parse::<ExpertMode>().unwrap(), ExpertMode::Click(ExpertSet::ALL));
        assert!(matches!("moe1".parse::<ExpertMode>(), Err(Error::TooFewExperts(1))));
    }

    #[test]
    fn instance_params_shapes_and_zero_projection() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 3);
        let generator = b.instance.clone().unwrap();
        let mut rng = derived_rng(1, "inst");
        let q = random_tensor(&mut rng, 5, D, 1.0);
        let params = generate_instance_params(&store, &generator, &q, None);
        assert_eq!(params.len(), 5);
        assert!(params.iter().all(|p| p.scale.len() == D && p.bias.len() == D));

        zero(&mut store, &generator.proj);
        for p in generate_instance_params(&store, &generator, &q, None) {
            assert!(p.scale.iter().chain(&p.bias).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn instance_params_permute_with_queries() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 3);
        let generator = b.instance.unwrap();
        let mut rng = derived_rng(2, "perm");
        let q = random_tensor(&mut rng, 4, D, 1.0);
        let order = [2, 0, 3, 1];
        let perm = Tensor::from_rows(&order.iter().map(|&i| q.row(i).to_vec()).collect::<Vec<_>>());
        let base = generate_instance_params(&store, &generator, &q, None);
        let moved = generate_instance_params(&store, &generator, &perm, None);
        for (new_i, &old_i) in order.iter().enumerate() {
            for (a, b) in moved[new_i].scale.iter().zip(&base[old_i].scale) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_expert_outputs_give_residual_identity() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 3);
        zero(&mut store, &b.common.as_ref().unwrap().output);
        for e in &b.class_experts {
            zero(&mut store, &e.output);
        }
        zero(&mut store, &b.instance.as_ref().unwrap().proj);
        let mut rng = derived_rng(3, "identity");
        let q = random_tensor(&mut rng, 4, D, 1.0);
        let out = click_moe_forward(&store, &b, &q, &[0, 1, 2, 1], None).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn constant_class_experts_shift_by_a_third_of_difference() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 2);
        let u = [vec![1.0; D], (0..D).map(|i| i as f64 * 0.1 - 0.3).collect::<Vec<_>>()];
        for (c, e) in b.class_experts.iter().enumerate() {
            zero(&mut store, &e.output);
            *store.get_mut(e.output.bias.unwrap()) = Tensor::row_vector(&u[c]);
        }
        // instance path independent of the query it serves
        zero(&mut store, &b.instance.as_ref().unwrap().proj);
        let mut rng = derived_rng(4, "const");
        let row = random_tensor(&mut rng, 1, D, 1.0);
        let q = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]);
        let out = click_moe_forward(&store, &b, &q, &[0, 1], None).unwrap();
        for j in 0..D {
            let expected = (u[0][j] - u[1][j]) / 3.0;
            assert!((out.get(0, j) - out.get(1, j) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_weights_are_one_third() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 2);
        assert_eq!(b.mixing_weights(), [1.0 / 3.0; 3]);
        assert!((b.mixing_weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn category_out_of_range_is_rejected() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 2);
        let err = click_moe_forward(&store, &b, &Tensor::zeros(1, D), &[2], None).unwrap_err();
        assert!(matches!(err, Error::CategoryOutOfRange { index: 2, count: 2 }));
    }

    #[test]
    fn class_routing_is_independent_of_other_experts() {
        let mut small = ParamStore::new();
        let b2 = bank(&mut small, ExpertMode::default(), 2);
        let mut large = ParamStore::new();
        let b6 = bank(&mut large, ExpertMode::default(), 6);
        let mut rng = derived_rng(5, "purity");
        let q = random_tensor(&mut rng, 3, D, 1.0);
        let a = click_moe_forward(&small, &b2, &q, &[0, 1, 0], None).unwrap();
        let b = click_moe_forward(&large, &b6, &q, &[0, 1, 0], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_mask_confines_instance_dependence() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 2);
        let generator = b.instance.unwrap();
        let mut rng = derived_rng(6, "dependence");
        let q = random_tensor(&mut rng, 4, D, 1.0);
        let mut q2 = q.clone();
        q2.row_mut(1)[0] += 0.5;
        let full_a = generate_instance_params(&store, &generator, &q, None);
        let full_b = generate_instance_params(&store, &generator, &q2, None);
        assert!((0..4).all(|i| full_a[i] != full_b[i]));
        let eye = AttentionMask::identity(4);
        let id_a = generate_instance_params(&store, &generator, &q, Some(&eye));
        let id_b = generate_instance_params(&store, &generator, &q2, Some(&eye));
        for i in 0..4 {
            assert_eq!(id_a[i] == id_b[i], i != 1);
        }
    }

    #[test]
    fn click_layer_gradients() {
        let mut store = ParamStore::new();
        let b = bank(&mut store, ExpertMode::default(), 3);
        let mut rng = derived_rng(7, "click-grad");
        let q = random_tensor(&mut rng, 5, D, 1.0);
        let mask = AttentionMask::from_groups(&[0, 0, 1, 1, 1]);
        let report = param_grad_report(&store, 12, &mut rng, |g| {
            let x = g.constant(q.clone());
            let y = b.forward(g, x, &[0, 2, 1, 0, 2], Some(&mask)).unwrap();
            let y = g.mul(y, y);
            g.sum(y)
        });
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn two_expert_router_uses_both() {
        let mut store = ParamStore::new();
        let moe = SparseMoe::new(&mut ParamBuilder::new(&mut store, 1), D, 2 * D, 2).unwrap();
        let mut rng = derived_rng(8, "two");
        let q = random_tensor(&mut rng, 4, D, 1.0);
        let mut g = Graph::with_params(&store);
        let x = g.constant(q);
        let w = moe.routing(&mut g, x);
        for r in 0..4 {
            let row = g.value(w).row(r);
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_router_selects_single_expert() {
        let mut store = ParamStore::new();
        let moe = SparseMoe::new(&mut ParamBuilder::new(&mut store, 1), D, 2 * D, 3).unwrap();
        zero(&mut store, &moe.router);
        *store.get_mut(moe.router.bias.unwrap()) = Tensor::row_vector(&[0.0, 200.0, 0.0]);
        let mut rng = derived_rng(9, "onehot");
        let q = random_tensor(&mut rng, 3, D, 1.0);
        let out = sparse_moe_forward(&store, &moe, &q);
        let mut g = Graph::with_params(&store);
        let x = g.constant(q.clone());
        let y = moe.experts[1].forward(&mut g, x);
        let expected = g.add(x, y);
        for (a, b) in out.data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_mixture_gradients() {
        let mut store = ParamStore::new();
        let moe = SparseMoe::new(&mut ParamBuilder::new(&mut store, 3), D, 2 * D, 4).unwrap();
        let mut rng = derived_rng(10, "moe-grad");
        let q = random_tensor(&mut rng, 6, D, 1.0);
        let report = param_grad_report(&store, 10, &mut rng, |g| {
            let x = g.constant(q.clone());
            let y = moe.forward(g, x);
            let y = g.mul(y, y);
            g.sum(y)
        });
        assert!(report.passed(), "{:?}", report.failures);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn top2_weights_are_renormalized(seed in 0u64..10_000, experts in 2usize..9) {
            let mut store = ParamStore::new();
            let moe = SparseMoe::new(&mut ParamBuilder::new(&mut store, seed), D, D, experts).unwrap();
            let mut rng = derived_rng(seed, "route");
            let q = random_tensor(&mut rng, 3, D, 3.0);
            let mut g = Graph::with_params(&store);
            let x = g.constant(q);
            let w = moe.routing(&mut g, x);
            for r in 0..3 {
                let row = g.value(w).row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().filter(|&&v| v > 0.0).count() <= 2);
            }
        }
    }
}
