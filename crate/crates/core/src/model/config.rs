use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which counterpart embeddings a posterior parameter attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Only counterparts the entity has rated.
    Local,
    /// Every counterpart.
    Global,
    Off,
}

/// How bilinear attention scores become weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    /// `s_ij / Σ s_ij'`, uniform when the sum is within 1e-8 of zero.
    Ratio,
    Softmax,
}

/// Shape of the cross-fed latent input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentInput {
    /// Zero-masked concatenation of all counterpart embeddings (width `J·K`).
    Concat,
    /// Mean of the rated counterparts' embeddings (width `K`); faster, coarser.
    Average,
}

/// Batch iteration order inside one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Every (user batch, item batch) block updates both encoders at once.
    Nested,
    /// A user pass against the item table, then an item pass against the user table.
    Sequential,
}

macro_rules! parse_enum {
    ($ty:ident, $($name:literal => $variant:ident),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Param(format!(
                        concat!("unknown ", stringify!($ty), " `{}` (expected one of: ", $($name, " ",)+ ")"),
                        other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $($ty::$variant => $name,)+ };
                f.write_str(name)
            }
        }
    };
}

parse_enum!(AttentionMode, "local" => Local, "global" => Global, "off" => Off);
parse_enum!(AttentionNorm, "ratio" => Ratio, "softmax" => Softmax);
parse_enum!(LatentInput, "concat" => Concat, "average" => Average);
parse_enum!(Schedule, "nested" => Nested, "sequential" => Sequential);

/// Model and optimization settings.
///
/// `layers_prime` hidden layers precede the concatenation on both input
/// paths; `layers` hidden layers follow it. Hidden layer `l` of either
/// network has width `widths[min(l, widths.len() - 1)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Embedding dimension `K`.
    pub k: usize,
    /// Intermediate embedding dimension `K′` (output width of each input path).
    pub k_prime: usize,
    pub layers: usize,
    pub layers_prime: usize,
    pub widths: Vec<usize>,
    pub beta_u: f64,
    pub beta_v: f64,
    /// `None` picks 100 when `min(I, J) ≤ 10 000`, otherwise 1 000.
    pub batch_users: Option<usize>,
    pub batch_items: Option<usize>,
    pub attention: AttentionMode,
    pub attention_norm: AttentionNorm,
    pub cross_feedback: bool,
    pub data_input: bool,
    pub latent_input: LatentInput,
    pub schedule: Schedule,
    pub init_mu: f64,
    pub init_sigma: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_iterations: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            k: 10,
            k_prime: 10,
            layers: 0,
            layers_prime: 1,
            widths: vec![50],
            beta_u: 1e-3,
            beta_v: 1e-3,
            batch_users: None,
            batch_items: None,
            attention: AttentionMode::Local,
            attention_norm: AttentionNorm::Ratio,
            cross_feedback: true,
            data_input: true,
            latent_input: LatentInput::Concat,
            schedule: Schedule::Nested,
            init_mu: 0.0,
            init_sigma: 0.1,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_iterations: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn hidden_width(&self, layer: usize) -> usize {
        self.widths[layer.min(self.widths.len() - 1)]
    }

    fn auto_batch(n_users: usize, n_items: usize) -> usize {
        if n_users.min(n_items) <= 10_000 {
            100
        } else {
            1_000
        }
    }

    pub fn batch_sizes(&self, n_users: usize, n_items: usize) -> (usize, usize) {
        let auto = Self::auto_batch(n_users, n_items);
        (
            self.batch_users.unwrap_or(auto),
            self.batch_items.unwrap_or(auto),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if self.k == 0 || self.k_prime == 0 {
            return bad("k and k-prime must be positive".into());
        }
        if self.k > self.k_prime {
            return bad(format!("k ({}) must not exceed k-prime ({})", self.k, self.k_prime));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a non-empty list of positive sizes".into());
        }
        let used = self.layers.max(self.layers_prime);
        for l in 0..used {
            let m = self.hidden_width(l);
            if m < self.k_prime {
                return bad(format!(
                    "hidden width {m} is smaller than k-prime ({})",
                    self.k_prime
                ));
            }
        }
        if !self.data_input && !self.cross_feedback {
            return bad("at least one of data input and cross feedback must be enabled".into());
        }
        if self.beta_u < 0.0 || self.beta_v < 0.0 {
            return bad("KL weights must be non-negative".into());
        }
        if self.init_sigma <= 0.0 {
            return bad(format!("init sigma must be positive, got {}", self.init_sigma));
        }
        if self.batch_users == Some(0) || self.batch_items == Some(0) {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("invalid optimizer settings".into());
        }
        Ok(())
    }

    /// Stable short hash of the configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("hyperparams serialize");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
