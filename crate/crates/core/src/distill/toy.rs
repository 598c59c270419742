//! Toy transformer used as distillation teacher and as the SEA student backbone.
//!
//! Blocks are residual and norm-free: `x += merge(attn) W_o`, then
//! `x += down(gelu(up(x)))`. The task is sequence copy over a small alphabet:
//! the second half of each sequence repeats the first. Causal models predict
//! the next token on the copied half; bidirectional ones emit the sequence
//! reversed.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::SeaConfig;
use crate::error::{Result, SeaError};
use crate::estimator::{estimate_var, Estimate, EstimatorWeights};
use crate::mask::{compress_k, grouped_topk, interpolate_mask};
use crate::nn::{bind, join, Linear, Params};
use crate::oracle::dense_sea_var;
use crate::sea::{sea_forward, Diagnostics, ForwardOptions, SeaWeights};
use crate::serialize::WeightStore;
use crate::tensor::Tensor;

use super::losses::{cross_entropy, dense_probs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_dim: usize,
    pub causal: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab: 16,
            seq_len: 32,
            model_dim: 16,
            heads: 2,
            layers: 2,
            mlp_dim: 32,
            causal: true,
        }
    }
}

impl ToyConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.vocab, self.seq_len, self.model_dim, self.heads, self.layers, self.mlp_dim];
        if fields.contains(&0) {
            return Err(SeaError::Config(format!("toy sizes must be positive: {self:?}")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(SeaError::Config("model_dim must be divisible by heads".into()));
        }
        if self.seq_len < 2 || self.seq_len % 2 != 0 {
            return Err(SeaError::Config("copy task needs an even seq_len ≥ 2".into()));
        }
        Ok(())
    }

    /// SEA settings matching this model's attention shape.
    pub fn sea_config(&self, compressed_len: usize, top_k: usize) -> SeaConfig {
        let causal = self.causal;
        SeaConfig {
            seq_len: self.seq_len,
            compressed_len,
            top_k,
            head_dim: self.head_dim(),
            heads: self.heads,
            hidden: 16,
            width_reduction: 2,
            channel_expansion: 2,
            features: 32,
            causal,
            mode: if causal { crate::TopKMode::CausalPerBatch } else { crate::TopKMode::PerQuery },
            ..SeaConfig::default()
        }
    }
}

/// One copy-task sequence with its supervised positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn copy_sample(cfg: &ToyConfig, rng: &mut impl Rng) -> Sample {
    let t = cfg.seq_len;
    let half = t / 2;
    let first: Vec<usize> = (0..half).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let tokens: Vec<usize> = first.iter().chain(first.iter()).copied().collect();
    let (positions, targets) = if cfg.causal {
        let p: Vec<usize> = (half - 1..t - 1).collect();
        let y = p.iter().map(|&i| tokens[i + 1]).collect();
        (p, y)
    } else {
        ((0..t).collect(), (0..t).map(|i| tokens[t - 1 - i]).collect())
    };
    Sample {
        tokens,
        positions,
        targets,
    }
}

pub fn copy_dataset(cfg: &ToyConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| copy_sample(cfg, &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub out: Linear<P>,
    pub up: Linear<P>,
    pub down: Linear<P>,
}

impl<P> Params<P> for Block<P> {
    type Mapped<Q> = Block<Q>;

    fn try_map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<Block<Q>> {
        Ok(Block {
            query: self.query.try_map(&join(prefix, "query"), f)?,
            key: self.key.try_map(&join(prefix, "key"), f)?,
            value: self.value.try_map(&join(prefix, "value"), f)?,
            out: self.out.try_map(&join(prefix, "out"), f)?,
            up: self.up.try_map(&join(prefix, "up"), f)?,
            down: self.down.try_map(&join(prefix, "down"), f)?,
        })
    }
}

/// Embeddings, blocks and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<P> {
    pub embed: P,
    pub positions: P,
    pub blocks: Vec<Block<P>>,
    pub head: Linear<P>,
}

impl<P> Params<P> for Backbone<P> {
    type Mapped<Q> = Backbone<Q>;

    fn try_map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q>) -> Result<Backbone<Q>> {
        let embed = f(&join(prefix, "embed"), &self.embed)?;
        let positions = f(&join(prefix, "positions"), &self.positions)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            blocks.push(b.try_map(&join(prefix, &format!("blocks.{i}")), f)?);
        }
        Ok(Backbone {
            embed,
            positions,
            blocks,
            head: self.head.try_map(&join(prefix, "head"), f)?,
        })
    }
}

impl Backbone<Tensor> {
    pub fn init(cfg: &ToyConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                query: Linear::init(d, d, 1.0, rng),
                key: Linear::init(d, d, 1.0, rng),
                value: Linear::init(d, d, 1.0, rng),
                out: Linear::init(d, d, 0.5, rng),
                up: Linear::init(d, cfg.mlp_dim, 1.0, rng),
                down: Linear::init(cfg.mlp_dim, d, 0.5, rng),
            })
            .collect();
        Backbone {
            embed: Tensor::randn([cfg.vocab, d], 1.0, rng),
            positions: Tensor::randn([cfg.seq_len, d], 1.0, rng),
            blocks,
            head: Linear::init(d, cfg.vocab, 1.0, rng),
        }
    }
}

fn split_heads(tape: &mut Tape, x: Var, cfg: &ToyConfig) -> Result<Var> {
    let r = tape.reshape(x, [cfg.seq_len, cfg.heads, cfg.head_dim()])?;
    tape.permute(r, &[1, 0, 2])
}

fn merge_heads(tape: &mut Tape, c: Var, cfg: &ToyConfig) -> Result<Var> {
    let p = tape.permute(c, &[1, 0, 2])?;
    tape.reshape(p, [cfg.seq_len, cfg.model_dim])
}

/// Per-layer attention inputs handed to an attention callback.
pub struct Heads {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Runs the backbone with `attend(tape, layer, heads) -> context [H,T,d]`.
/// Returns per-layer block outputs `[T, D]` and logits `[T, V]`.
pub fn run_backbone(
    tape: &mut Tape,
    bb: &Backbone<Var>,
    cfg: &ToyConfig,
    tokens: &[usize],
    attend: &mut dyn FnMut(&mut Tape, usize, &Heads) -> Result<Var>,
) -> Result<(Vec<Var>, Var)> {
    if tokens.len() != cfg.seq_len || tokens.iter().any(|&t| t >= cfg.vocab) {
        return Err(SeaError::dim("toy forward", format!("expected {} tokens below {}", cfg.seq_len, cfg.vocab)));
    }
    let d = cfg.model_dim;
    let index: Rc<[usize]> = tokens.iter().flat_map(|&tok| (0..d).map(move |j| tok * d + j)).collect();
    let e = tape.gather(bb.embed, index, &[cfg.seq_len, d])?;
    let mut x = tape.add(e, bb.positions)?;
    let mut outputs = Vec::with_capacity(bb.blocks.len());
    for (i, b) in bb.blocks.iter().enumerate() {
        let q = b.query.forward(tape, x)?;
        let k = b.key.forward(tape, x)?;
        let v = b.value.forward(tape, x)?;
        let heads = Heads {
            q: split_heads(tape, q, cfg)?,
            k: split_heads(tape, k, cfg)?,
            v: split_heads(tape, v, cfg)?,
        };
        let c = attend(tape, i, &heads)?;
        let merged = merge_heads(tape, c, cfg)?;
        let o = b.out.forward(tape, merged)?;
        let x1 = tape.add(x, o)?;
        let u = b.up.forward(tape, x1)?;
        let u = tape.gelu(u);
        let m = b.down.forward(tape, u)?;
        x = tape.add(x1, m)?;
        outputs.push(x);
    }
    let logits = bb.head.forward(tape, x)?;
    Ok((outputs, logits))
}

/// Rows of `logits` at `positions`.
pub fn select_rows(tape: &mut Tape, logits: Var, positions: &[usize]) -> Result<Var> {
    let v = tape.shape(logits)[1];
    let index: Rc<[usize]> = positions.iter().flat_map(|&p| (0..v).map(move |j| p * v + j)).collect();
    tape.gather(logits, index, &[positions.len(), v])
}

/// Quadratic-attention teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTeacher {
    pub cfg: ToyConfig,
    pub backbone: Backbone<Tensor>,
}

/// Teacher buffers for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTrace {
    /// Per layer `[H, T, T]`.
    pub attn: Vec<Tensor>,
    /// Per layer `[H, T, d]`.
    pub context: Vec<Tensor>,
    /// Per layer `[T, D]`.
    pub outputs: Vec<Tensor>,
    /// `[T, V]`
    pub logits: Tensor,
}

impl ToyTeacher {
    pub fn init(cfg: ToyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ToyTeacher {
            backbone: Backbone::init(&cfg, &mut rng),
            cfg,
        })
    }

    /// Forward on `tape` with the backbone already bound.
    pub fn forward_var(
        tape: &mut Tape,
        bb: &Backbone<Var>,
        cfg: &ToyConfig,
        tokens: &[usize],
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>, Var)> {
        let mut attn = Vec::new();
        let mut ctx = Vec::new();
        let (outs, logits) = run_backbone(tape, bb, cfg, tokens, &mut |tape, _, h| {
            let a = dense_probs(tape, h.q, h.k, cfg.causal)?;
            let c = tape.matmul(a, h.v)?;
            attn.push(a);
            ctx.push(c);
            Ok(c)
        })?;
        Ok((attn, ctx, outs, logits))
    }

    pub fn trace(&self, tokens: &[usize]) -> Result<TeacherTrace> {
        let mut tape = Tape::new();
        let bb = bind(&mut tape, &self.backbone, "", false);
        let (attn, ctx, outs, logits) = Self::forward_var(&mut tape, &bb, &self.cfg, tokens)?;
        let vals = |vs: Vec<Var>| vs.into_iter().map(|v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(TeacherTrace {
            attn: vals(attn),
            context: vals(ctx),
            outputs: vals(outs),
            logits: tape.value(logits).clone(),
        })
    }

    /// Mean task cross-entropy over `samples`.
    pub fn task_loss(&self, samples: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let mut tape = Tape::new();
            let bb = bind(&mut tape, &self.backbone, "", false);
            let (_, _, _, logits) = Self::forward_var(&mut tape, &bb, &self.cfg, &s.tokens)?;
            let rows = select_rows(&mut tape, logits, &s.positions)?;
            let l = cross_entropy(&mut tape, rows, &s.targets)?;
            total += tape.value(l).item();
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn save_into(&self, store: &mut WeightStore, prefix: &str) {
        self.backbone.visit(prefix, &mut |n, t| store.insert(n, t.clone()));
    }

    pub fn load_from(store: &mut WeightStore, prefix: &str, cfg: ToyConfig) -> Result<Self> {
        let template = ToyTeacher::init(cfg, 0)?;
        let backbone = template.backbone.try_map(prefix, &mut |n, t| store.take(n, t.shape()))?;
        Ok(ToyTeacher { cfg, backbone })
    }
}

/// Teacher backbone with every attention replaced by SEA.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyStudent {
    pub cfg: ToyConfig,
    pub sea_cfg: SeaConfig,
    pub backbone: Backbone<Tensor>,
    pub sea: Vec<SeaWeights>,
}

/// Student buffers for one layer on a tape.
pub struct StudentLayer {
    pub heads: Heads,
    pub estimate: Estimate<Var>,
    pub context: Var,
    pub output: Var,
}

impl ToyStudent {
    /// Copies the teacher backbone and adds freshly initialized SEA weights.
    pub fn from_teacher(teacher: &ToyTeacher, sea_cfg: SeaConfig, seed: u64) -> Result<Self> {
        let cfg = teacher.cfg;
        sea_cfg.validate()?;
        let want = (cfg.seq_len, cfg.heads, cfg.head_dim(), cfg.causal);
        if (sea_cfg.seq_len, sea_cfg.heads, sea_cfg.head_dim, sea_cfg.causal) != want {
            return Err(SeaError::Config(format!(
                "SEA settings (T, H, d, causal) must be {want:?}, got {:?}",
                (sea_cfg.seq_len, sea_cfg.heads, sea_cfg.head_dim, sea_cfg.causal)
            )));
        }
        let sea = (0..cfg.layers)
            .map(|i| SeaWeights::init(&sea_cfg, seed.wrapping_add(i as u64 * 7919)))
            .collect();
        Ok(ToyStudent {
            cfg,
            sea_cfg,
            backbone: teacher.backbone.clone(),
            sea,
        })
    }

    /// Training forward: dense emulation of SEA on `tape` with the given bound weights.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        bb: &Backbone<Var>,
        est: &[EstimatorWeights<Var>],
        tokens: &[usize],
    ) -> Result<(Vec<StudentLayer>, Var)> {
        let cfg = &self.sea_cfg;
        let mut layers: Vec<(Heads, Estimate<Var>, Var)> = Vec::new();
        let (outs, logits) = run_backbone(tape, bb, &self.cfg, tokens, &mut |tape, i, h| {
            let e = estimate_var(tape, h.q, h.k, h.v, &est[i], &self.sea[i].features, cfg)?;
            let k_hat = compress_k(cfg.top_k, cfg.compressed_len, cfg.seq_len);
            let m = grouped_topk(tape.value(e.a_hat), cfg.mode, k_hat)?;
            let keep: Vec<bool> = interpolate_mask(&m, cfg.top_k, cfg.causal)?
                .densify()
                .data()
                .iter()
                .map(|&x| x != 0.0)
                .collect();
            let c = dense_sea_var(tape, h.q, h.k, h.v, &e, &keep, cfg.causal)?;
            layers.push((Heads { q: h.q, k: h.k, v: h.v }, e, c));
            Ok(c)
        })?;
        let layers = layers
            .into_iter()
            .zip(outs)
            .map(|((heads, estimate, context), output)| StudentLayer {
                heads,
                estimate,
                context,
                output,
            })
            .collect();
        Ok((layers, logits))
    }

    /// Inference logits `[T, V]` through the sparse path with budget `top_k`.
    pub fn logits(&self, tokens: &[usize], top_k: usize) -> Result<Tensor> {
        let cfg = self.sea_cfg.with_top_k(top_k)?;
        let mut tape = Tape::new();
        let bb = bind(&mut tape, &self.backbone, "", false);
        let (_, logits) = run_backbone(&mut tape, &bb, &self.cfg, tokens, &mut |tape, i, h| {
            let (q, k, v) = (tape.value(h.q), tape.value(h.k), tape.value(h.v));
            let out = sea_forward(q, k, v, &self.sea[i], &cfg, ForwardOptions::default())?;
            Ok(tape.constant(out.c_sea))
        })?;
        Ok(tape.value(logits).clone())
    }

    /// Per-layer intermediate buffers of the sparse path.
    pub fn diagnostics(&self, tokens: &[usize], top_k: usize) -> Result<Vec<Diagnostics>> {
        let cfg = self.sea_cfg.with_top_k(top_k)?;
        let mut tape = Tape::new();
        let bb = bind(&mut tape, &self.backbone, "", false);
        let mut out = Vec::new();
        run_backbone(&mut tape, &bb, &self.cfg, tokens, &mut |tape, i, h| {
            let (q, k, v) = (tape.value(h.q), tape.value(h.k), tape.value(h.v));
            let opts = ForwardOptions { diagnostics: true, ..Default::default() };
            let r = sea_forward(q, k, v, &self.sea[i], &cfg, opts)?;
            out.extend(r.diagnostics);
            Ok(tape.constant(r.c_sea))
        })?;
        Ok(out)
    }

    /// Mean task cross-entropy through the sparse path.
    pub fn task_loss(&self, samples: &[Sample], top_k: usize) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let logits = self.logits(&s.tokens, top_k)?;
            let mut tape = Tape::new();
            let l = tape.constant(logits);
            let rows = select_rows(&mut tape, l, &s.positions)?;
            let ce = cross_entropy(&mut tape, rows, &s.targets)?;
            total += tape.value(ce).item();
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn save_into(&self, store: &mut WeightStore, prefix: &str) {
        self.backbone.visit(&join(prefix, "backbone"), &mut |n, t| store.insert(n, t.clone()));
        for (i, w) in self.sea.iter().enumerate() {
            w.save_into(store, &join(prefix, &format!("sea.{i}")));
        }
    }

    pub fn load_from(store: &mut WeightStore, prefix: &str, cfg: ToyConfig, sea_cfg: SeaConfig) -> Result<Self> {
        let template = ToyTeacher::init(cfg, 0)?;
        let backbone = template
            .backbone
            .try_map(&join(prefix, "backbone"), &mut |n, t| store.take(n, t.shape()))?;
        let sea = (0..cfg.layers)
            .map(|i| SeaWeights::load_from(store, &join(prefix, &format!("sea.{i}")), &sea_cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyStudent {
            cfg,
            sea_cfg,
            backbone,
            sea,
        })
    }
}

/// Teacher and student in one store, with both configs in the metadata.
pub fn save_pair(teacher: &ToyTeacher, student: &ToyStudent) -> WeightStore {
    let mut store = WeightStore::new();
    store.set_meta("toy_config", serde_json::to_string(&teacher.cfg).expect("config serializes"));
    for (k, v) in student.sea_cfg.to_pairs() {
        store.set_meta(format!("sea.{k}"), v);
    }
    teacher.save_into(&mut store, "teacher");
    student.save_into(&mut store, "student");
    store
}

/// Inverse of [`save_pair`].
pub fn load_pair(mut store: WeightStore) -> Result<(ToyTeacher, ToyStudent)> {
    let cfg: ToyConfig = store
        .meta("toy_config")
        .ok_or_else(|| SeaError::Format("missing `toy_config` metadata".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| SeaError::Format(format!("toy_config: {e}"))))?;
    let pairs: Vec<(String, String)> = SeaConfig::default()
        .to_pairs()
        .into_keys()
        .map(|k| {
            let v = store.meta(&format!("sea.{k}")).ok_or_else(|| SeaError::Format(format!("missing `sea.{k}` metadata")));
            v.map(|v| (k, v.to_string()))
        })
        .collect::<Result<_>>()?;
    let sea_cfg = SeaConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let teacher = ToyTeacher::load_from(&mut store, "teacher", cfg)?;
    let student = ToyStudent::load_from(&mut store, "student", cfg, sea_cfg)?;
    Ok((teacher, student))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(causal: bool) -> ToyConfig {
        ToyConfig {
            seq_len: 8,
            model_dim: 8,
            mlp_dim: 8,
            vocab: 5,
            causal,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn copy_samples_repeat_the_first_half() {
        let cfg = ToyConfig::default();
        let s = copy_dataset(&cfg, 1, 3).remove(0);
        assert_eq!(s.tokens[..16], s.tokens[16..]);
        assert_eq!(s.positions, (15..31).collect::<Vec<_>>());
        for (p, y) in s.positions.iter().zip(&s.targets) {
            assert_eq!(s.tokens[p + 1], *y);
        }
        let b = copy_dataset(&ToyConfig { causal: false, ..cfg }, 1, 3).remove(0);
        assert_eq!(b.targets[0], b.tokens[31]);
        assert_eq!(copy_dataset(&cfg, 4, 9), copy_dataset(&cfg, 4, 9));
    }

    #[test]
    fn teacher_trace_shapes() {
        for causal in [false, true] {
            let t = ToyTeacher::init(tiny(causal), 1).unwrap();
            let s = copy_dataset(&t.cfg, 1, 2).remove(0);
            let tr = t.trace(&s.tokens).unwrap();
            assert_eq!(tr.attn.len(), 2);
            assert_eq!(tr.attn[0].shape(), &[2, 8, 8]);
            assert_eq!(tr.context[1].shape(), &[2, 8, 4]);
            assert_eq!(tr.outputs[0].shape(), &[8, 8]);
            assert_eq!(tr.logits.shape(), &[8, 5]);
            for row in tr.attn[1].data().chunks(8) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            if causal {
                assert_eq!(tr.attn[0].at(&[1, 2, 5]), 0.0);
            }
        }
    }

    #[test]
    fn full_budget_student_tracks_teacher_shape() {
        let t = ToyTeacher::init(tiny(true), 1).unwrap();
        let st = ToyStudent::from_teacher(&t, t.cfg.sea_config(4, 2), 5).unwrap();
        let s = copy_dataset(&t.cfg, 2, 2);
        let a = st.task_loss(&s, 2).unwrap();
        let b = st.task_loss(&s, 8).unwrap();
        assert!(a.is_finite() && b.is_finite());
        assert!(st.task_loss(&s, 9).is_err());
    }

    #[test]
    fn mismatched_sea_settings_are_rejected() {
        let t = ToyTeacher::init(tiny(true), 1).unwrap();
        let mut c = t.cfg.sea_config(4, 2);
        c.head_dim = 8;
        assert!(ToyStudent::from_teacher(&t, c, 0).is_err());
    }

    #[test]
    fn train_and_sparse_paths_agree() {
        for causal in [false, true] {
            let t = ToyTeacher::init(tiny(causal), 1).unwrap();
            let st = ToyStudent::from_teacher(&t, t.cfg.sea_config(4, 3), 5).unwrap();
            let s = copy_dataset(&t.cfg, 1, 2).remove(0);
            let mut tape = Tape::new();
            let bb = bind(&mut tape, &st.backbone, "", false);
            let est: Vec<_> = st.sea.iter().map(|w| bind(&mut tape, &w.estimator, "", false)).collect();
            let (_, logits) = st.forward_var(&mut tape, &bb, &est, &s.tokens).unwrap();
            let sparse = st.logits(&s.tokens, 3).unwrap();
            assert!(tape.value(logits).max_abs_diff(&sparse) < 1e-10);
        }
    }

    #[test]
    fn student_roundtrips_through_store() {
        let t = ToyTeacher::init(tiny(true), 1).unwrap();
        let st = ToyStudent::from_teacher(&t, t.cfg.sea_config(4, 2), 5).unwrap();
        let store = save_pair(&t, &st);
        let (t2, st2) = load_pair(WeightStore::from_bytes(&store.to_bytes()).unwrap()).unwrap();
        assert_eq!((t2.cfg, st2.sea_cfg), (t.cfg, st.sea_cfg));
        // Stored as f32: a second save must reproduce the same bytes.
        assert_eq!(save_pair(&t2, &st2).to_bytes(), store.to_bytes());
        assert!(load_pair(WeightStore::new()).is_err());
    }
}
