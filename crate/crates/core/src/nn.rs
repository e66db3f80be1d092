//! Plumbing shared by the backbone and the fusion model: parameter
//! registration, batch-norm buffers, dropout masks and initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnLayout, BnStats, ParamStore, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Weight of the new batch statistic in the running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Non-learned state (batch-norm running statistics), keyed like parameters.
pub type Buffers<T> = BTreeMap<String, Tensor<T>>;

/// Put every parameter on the tape. Frozen parameters become constants, so
/// no gradient reaches them.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>) -> BTreeMap<String, Var> {
    store
        .iter()
        .map(|(name, p)| (name.to_string(), tape.leaf(p.value.clone(), p.trainable)))
        .collect()
}

/// State threaded through one forward pass.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: &'a BTreeMap<String, Var>,
    buffers: &'a Buffers<T>,
    pub train: bool,
    rng: Option<ChaCha8Rng>,
    /// Batch statistics of every train-mode batch norm, by layer prefix.
    pub bn_stats: Vec<(String, BnStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// `dropout_seed` drives the dropout masks in train mode; `None` disables
    /// dropout even in train mode (used by gradient checks).
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a BTreeMap<String, Var>,
        buffers: &'a Buffers<T>,
        train: bool,
        dropout_seed: Option<u64>,
    ) -> Self {
        Forward {
            tape,
            params,
            buffers,
            train,
            rng: dropout_seed.map(ChaCha8Rng::seed_from_u64),
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w, b) = (self.param(&format!("{prefix}.weight"))?, self.param(&format!("{prefix}.bias"))?);
        self.tape.linear(x, w, b)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str, layout: BnLayout) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let buf = |k: &str| -> Result<&Tensor<T>> {
            self.buffers
                .get(&format!("{prefix}.{k}"))
                .ok_or_else(|| Error::Contract(format!("missing buffer {prefix}.{k}")))
        };
        let (rm, rv) = (buf("running_mean")?.data().to_vec(), buf("running_var")?.data().to_vec());
        let (y, stats) = self.tape.batch_norm(x, g, b, &rm, &rv, layout, self.train, BN_EPS)?;
        if let Some(s) = stats {
            self.bn_stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Inverted dropout in train mode with a dropout seed; identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match (&mut self.rng, self.train && p > 0.0) {
            (Some(rng), true) => {
                let n = self.tape.value(x).numel();
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
                self.tape.dropout(x, &keep, p)
            }
            _ => Ok(x),
        }
    }
}

/// Fold train-mode batch statistics into the running averages.
pub fn update_running_stats<T: Scalar>(buffers: &mut Buffers<T>, stats: &[(String, BnStats<T>)]) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    for (prefix, s) in stats {
        for (key, new) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{prefix}.{key}");
            let buf = buffers
                .get_mut(&name)
                .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))?;
            for (r, &v) in buf.data_mut().iter_mut().zip(new.iter()) {
                *r = keep * *r + m * v;
            }
        }
    }
    Ok(())
}

/// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, bias zero.
pub fn init_affine(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    weight_shape: &[usize],
    fan_in: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::from_fn(weight_shape.to_vec(), |_| rng.random_range(-bound..bound) as f32);
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([weight_shape[0]]))?;
    Ok(())
}

/// Gamma 1, beta 0, running mean 0, running variance 1.
pub fn init_batch_norm(store: &mut ParamStore<f32>, buffers: &mut Buffers<f32>, prefix: &str, n: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones([n]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([n]))?;
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros([n]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::ones([n]));
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore<f32>, prefix: &str, n: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::ones([n]))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([n]))?;
    Ok(())
}

pub fn cast_buffers<T: Scalar, U: Scalar>(b: &Buffers<T>) -> Buffers<U> {
    b.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}
