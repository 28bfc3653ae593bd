use serde::{Deserialize, Serialize};

use super::scan::{traj_ssm, ScanMode};
use crate::error::{Error, Result};
use crate::tensor::kernels::{softplus_inv, SeqLayout};
use crate::tensor::nn::Linear;
use crate::tensor::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Width of the movement-feature input.
pub const MOVEMENT_DIMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    /// Embedding width `E`.
    pub embed: usize,
    /// Inner width `D`.
    pub model: usize,
    /// State size `N`.
    pub state: usize,
    /// Scan heads `H`.
    pub heads: usize,
    /// Causal convolution width.
    pub conv: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.model == 0 || self.state == 0 || self.heads == 0 || self.conv == 0 {
            return Err(Error::Config(format!("block dimensions must be positive: {self:?}")));
        }
        if !self.model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.model, self.heads
            )));
        }
        Ok(())
    }
}

/// One Traj-Mamba block. With `vanilla` set, B, C and Δ̂ come from the
/// block's own input branch instead of the movement features.
#[derive(Clone, Debug)]
pub struct TrajMambaBlock {
    pub dims: BlockDims,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub conv: ParamId,
    pub param_proj: Linear,
    pub vanilla: bool,
    pub delta_bias: ParamId,
    pub a_log: ParamId,
    pub norm: ParamId,
    pub out_proj: Linear,
}

/// `B`, `C` and the positive step sizes `Δ`.
#[derive(Clone, Copy, Debug)]
pub struct SsmParams {
    pub b: Var,
    pub c: Var,
    pub dt: Var,
}

impl TrajMambaBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        dims: BlockDims,
        vanilla: bool,
    ) -> Result<Self> {
        dims.validate()?;
        let BlockDims {
            embed: e,
            model: d,
            state: n,
            heads: h,
            conv: k,
        } = dims;
        let in_proj = Linear::new(store, rng, &format!("{prefix}.in_proj"), e, d, false)?;
        let gate_proj = Linear::new(store, rng, &format!("{prefix}.gate_proj"), e, d, false)?;
        let conv = store.add(format!("{prefix}.conv"), rng.uniform_tensor(&[d, k], (1.0 / k as f64).sqrt()))?;
        let param_proj = if vanilla {
            Linear::new(store, rng, &format!("{prefix}.x_proj"), d, 2 * n + h, true)?
        } else {
            Linear::new(store, rng, &format!("{prefix}.mb_proj"), MOVEMENT_DIMS, 2 * n + h, true)?
        };
        // step sizes log-uniform in [1e-3, 1e-1] at zero input
        let mut bias = Vec::with_capacity(h);
        for _ in 0..h {
            let dt = (rng.uniform(1e-3f64.ln(), 1e-1f64.ln())).exp();
            bias.push(softplus_inv(dt));
        }
        let delta_bias = store.add(format!("{prefix}.delta_bias"), Tensor::from_f64([h], &bias)?)?;
        let a_log: Vec<f64> = (0..h)
            .map(|j| if h == 1 { 0.0 } else { j as f64 / (h - 1) as f64 * (h as f64).ln() })
            .collect();
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::from_f64([h], &a_log)?)?;
        let norm = store.add(format!("{prefix}.norm"), Tensor::full([d], T::one()))?;
        let out_proj = Linear::new(store, rng, &format!("{prefix}.out_proj"), d, e, false)?;
        Ok(Self {
            dims,
            in_proj,
            gate_proj,
            conv,
            param_proj,
            vanilla,
            delta_bias,
            a_log,
            norm,
            out_proj,
        })
    }

    /// `X = SiLU(CausalConv(Linear(Z)))`.
    pub fn block_input<T: Scalar>(&self, tape: &Tape<'_, T>, z: Var, layout: &SeqLayout) -> Result<Var> {
        let u = self.in_proj.forward(tape, z)?;
        let conv = tape.causal_conv(u, tape.param(self.conv), layout.seq_len)?;
        Ok(tape.silu(conv))
    }

    /// One linear map to `2N + H` columns split into `B`, `C`, `Δ̂`, then
    /// `Δ = softplus(Δ̂ + b_Δ)`. `source` is the movement features, or `X`
    /// for the vanilla variant.
    pub fn parameterize<T: Scalar>(&self, tape: &Tape<'_, T>, source: Var) -> Result<SsmParams> {
        let n = self.dims.state;
        let p = self.param_proj.forward(tape, source)?;
        let b = tape.slice_cols(p, 0, n)?;
        let c = tape.slice_cols(p, n, n)?;
        let dt_hat = tape.slice_cols(p, 2 * n, self.dims.heads)?;
        let dt = tape.softplus(tape.add_bias(dt_hat, tape.param(self.delta_bias))?);
        Ok(SsmParams { b, c, dt })
    }

    /// `A = −exp(a_log)`.
    pub fn state_matrix<T: Scalar>(&self, tape: &Tape<'_, T>) -> Var {
        let a = tape.exp(tape.param(self.a_log));
        tape.scale(a, -T::one())
    }

    /// `Z' = Linear(RMSNorm(Y ⊙ SiLU(Linear(Z))))`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        z: Var,
        movement: Var,
        layout: &SeqLayout,
        mode: ScanMode,
    ) -> Result<Var> {
        let x = self.block_input(tape, z, layout)?;
        let ssm = self.parameterize(tape, if self.vanilla { x } else { movement })?;
        let a = self.state_matrix(tape);
        let y = traj_ssm(tape, x, ssm.dt, a, ssm.b, ssm.c, layout, mode)?;
        let gate = tape.silu(self.gate_proj.forward(tape, z)?);
        let h = tape.mul(y, gate)?;
        let h = tape.rmsnorm(h, tape.param(self.norm))?;
        self.out_proj.forward(tape, h)
    }
}
