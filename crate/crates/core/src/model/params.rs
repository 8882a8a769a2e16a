use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

/// Initial value of every trainable exit-weight logit.
pub const DEFAULT_T_INIT: f64 = 4.0;

/// Weights of the one transformer block reused at every depth.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ff1_w: Array2<f64>,
    pub ff1_b: Array1<f64>,
    pub ff2_w: Array2<f64>,
    pub ff2_b: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

/// Every trainable value of the model.
///
/// Matrices are stored input-major (`x.dot(&w)` applies them). Apart from
/// `exit_t`, whose length is `depth - 1`, no tensor shape depends on depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub token_embed: Array2<f64>,
    pub embed_proj: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub encoder: EncoderBlock,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub exit_t: Array1<f64>,
}

/// Number of named tensors in [`Parameters::tensors`].
pub const TENSOR_COUNT: usize = 22;

/// Name of the exit-weight tensor, the only one whose size depends on depth.
pub const EXIT_T_NAME: &str = "exit_t";

impl Parameters {
    /// Seeded initialization. Weight matrices draw from N(0, 1/fan_in), the
    /// token table from N(0, 1), positions from N(0, 0.1); layer-norm gains
    /// start at 1 and all biases at 0.
    ///
    /// Shared tensors are drawn before anything depth-dependent, so two
    /// configs that differ only in depth get identical shared weights.
    pub fn init(cfg: &ModelConfig, seed: u64, t_init: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, f, c) = (cfg.hidden_dim, cfg.embed_dim, cfg.ffn_dim, cfg.num_classes);

        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("std is positive");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let token_embed = normal(cfg.vocab_size, e, 1.0);
        let embed_proj = normal(e, d, fan(e));
        let pos_embed = normal(cfg.max_seq_len, d, 0.1);
        let wq = normal(d, d, fan(d));
        let wk = normal(d, d, fan(d));
        let wv = normal(d, d, fan(d));
        let wo = normal(d, d, fan(d));
        let ff1_w = normal(d, f, fan(d));
        let ff2_w = normal(f, d, fan(f));
        let cls_w = normal(d, c, fan(d));

        Self {
            token_embed,
            embed_proj,
            pos_embed,
            encoder: EncoderBlock {
                wq,
                bq: Array1::zeros(d),
                wk,
                bk: Array1::zeros(d),
                wv,
                bv: Array1::zeros(d),
                wo,
                bo: Array1::zeros(d),
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                ff1_w,
                ff1_b: Array1::zeros(f),
                ff2_w,
                ff2_b: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
            },
            cls_w,
            cls_b: Array1::zeros(c),
            exit_t: Array1::from_elem(cfg.depth.saturating_sub(1), t_init),
        }
    }

    /// All-zero parameters shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::init(cfg, 0, 0.0).zeros_like()
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named flat views in checkpoint order; `exit_t` is last.
    pub fn tensors(&self) -> [(&'static str, &[f64]); TENSOR_COUNT] {
        let enc = &self.encoder;
        [
            ("token_embed", slice2(&self.token_embed)),
            ("embed_proj", slice2(&self.embed_proj)),
            ("pos_embed", slice2(&self.pos_embed)),
            ("enc.wq", slice2(&enc.wq)),
            ("enc.bq", slice1(&enc.bq)),
            ("enc.wk", slice2(&enc.wk)),
            ("enc.bk", slice1(&enc.bk)),
            ("enc.wv", slice2(&enc.wv)),
            ("enc.bv", slice1(&enc.bv)),
            ("enc.wo", slice2(&enc.wo)),
            ("enc.bo", slice1(&enc.bo)),
            ("enc.ln1_gain", slice1(&enc.ln1_gain)),
            ("enc.ln1_bias", slice1(&enc.ln1_bias)),
            ("enc.ff1_w", slice2(&enc.ff1_w)),
            ("enc.ff1_b", slice1(&enc.ff1_b)),
            ("enc.ff2_w", slice2(&enc.ff2_w)),
            ("enc.ff2_b", slice1(&enc.ff2_b)),
            ("enc.ln2_gain", slice1(&enc.ln2_gain)),
            ("enc.ln2_bias", slice1(&enc.ln2_bias)),
            ("cls_w", slice2(&self.cls_w)),
            ("cls_b", slice1(&self.cls_b)),
            (EXIT_T_NAME, slice1(&self.exit_t)),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); TENSOR_COUNT] {
        let enc = &mut self.encoder;
        [
            ("token_embed", slice2_mut(&mut self.token_embed)),
            ("embed_proj", slice2_mut(&mut self.embed_proj)),
            ("pos_embed", slice2_mut(&mut self.pos_embed)),
            ("enc.wq", slice2_mut(&mut enc.wq)),
            ("enc.bq", slice1_mut(&mut enc.bq)),
            ("enc.wk", slice2_mut(&mut enc.wk)),
            ("enc.bk", slice1_mut(&mut enc.bk)),
            ("enc.wv", slice2_mut(&mut enc.wv)),
            ("enc.bv", slice1_mut(&mut enc.bv)),
            ("enc.wo", slice2_mut(&mut enc.wo)),
            ("enc.bo", slice1_mut(&mut enc.bo)),
            ("enc.ln1_gain", slice1_mut(&mut enc.ln1_gain)),
            ("enc.ln1_bias", slice1_mut(&mut enc.ln1_bias)),
            ("enc.ff1_w", slice2_mut(&mut enc.ff1_w)),
            ("enc.ff1_b", slice1_mut(&mut enc.ff1_b)),
            ("enc.ff2_w", slice2_mut(&mut enc.ff2_w)),
            ("enc.ff2_b", slice1_mut(&mut enc.ff2_b)),
            ("enc.ln2_gain", slice1_mut(&mut enc.ln2_gain)),
            ("enc.ln2_bias", slice1_mut(&mut enc.ln2_bias)),
            ("cls_w", slice2_mut(&mut self.cls_w)),
            ("cls_b", slice1_mut(&mut self.cls_b)),
            (EXIT_T_NAME, slice1_mut(&mut self.exit_t)),
        ]
    }
}

impl Parameters {
    /// Number of scalars excluding the exit-weight logits. Independent of depth.
    pub fn shared_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(name, _)| *name != EXIT_T_NAME)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Resizes `exit_t` for a different depth, keeping existing entries and
    /// filling new ones with `t_init`.
    pub fn resize_exit_weights(&mut self, depth: usize, t_init: f64) {
        let n = depth.saturating_sub(1);
        let old = std::mem::take(&mut self.exit_t);
        self.exit_t = Array1::from_shape_fn(n, |i| old.get(i).copied().unwrap_or(t_init));
    }

    /// Flattened copy of every value in [`tensors`](Self::tensors) order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Mutable reference to the `index`-th value of the flattened layout.
    pub fn flat_mut(&mut self, mut index: usize) -> &mut f64 {
        for (_, t) in self.tensors_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Name and offset within its tensor of the `index`-th flattened value.
    pub fn locate(&self, mut index: usize) -> Option<(&'static str, usize)> {
        for (name, t) in self.tensors() {
            if index < t.len() {
                return Some((name, index));
            }
            index -= t.len();
        }
        None
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_count_ignores_depth() {
        let base = ModelConfig::default();
        let a = Parameters::init(&base.with_depth(6), 1, DEFAULT_T_INIT);
        let b = Parameters::init(&base.with_depth(24), 1, DEFAULT_T_INIT);
        assert_eq!(a.shared_count(), b.shared_count());
        assert_eq!(a.total_count() + 18, b.total_count());
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.token_embed, b.token_embed);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(
            Parameters::init(&cfg, 3, 4.0),
            Parameters::init(&cfg, 3, 4.0)
        );
        assert_ne!(
            Parameters::init(&cfg, 3, 4.0),
            Parameters::init(&cfg, 4, 4.0)
        );
    }

    #[test]
    fn flat_indexing_matches_layout() {
        let cfg = ModelConfig {
            depth: 3,
            ..ModelConfig::default()
        };
        let mut p = Parameters::init(&cfg, 9, DEFAULT_T_INIT);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.total_count());
        let last = flat.len() - 1;
        assert_eq!(p.locate(last), Some((EXIT_T_NAME, 1)));
        *p.flat_mut(last) = -1.0;
        assert_eq!(p.exit_t[1], -1.0);
        assert_eq!(p.locate(0), Some(("token_embed", 0)));
        assert_eq!(p.locate(flat.len()), None);
    }

    #[test]
    fn resize_exit_weights_keeps_prefix() {
        let cfg = ModelConfig {
            depth: 3,
            ..ModelConfig::default()
        };
        let mut p = Parameters::init(&cfg, 0, 1.5);
        p.exit_t[0] = 0.25;
        p.resize_exit_weights(5, 4.0);
        assert_eq!(p.exit_t.to_vec(), vec![0.25, 1.5, 4.0, 4.0]);
        p.resize_exit_weights(1, 4.0);
        assert!(p.exit_t.is_empty());
    }
}
