//! Selective state-space scan: discretization, the reference recurrence, a
//! chunked variant, and a tape operation with an adjoint backward pass.

use crate::error::{Error, Result};
use crate::tensor::kernels::SeqLayout;
use crate::tensor::{BackwardOp, Scalar, Tape, Tensor, Var};

/// Discretized scan inputs of one sequence.
///
/// Layouts: `a_bar` is `n × H`, `b_bar` is `n × H × N`, `c` is `n × N`,
/// `x` is `n × H × P` (`P` = channels per head).
#[derive(Clone, Debug, PartialEq)]
pub struct SsmInputs<T> {
    pub n: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state: usize,
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
    pub x: Vec<T>,
}

impl<T: Scalar> SsmInputs<T> {
    pub fn new(
        n: usize,
        heads: usize,
        head_dim: usize,
        state: usize,
        a_bar: Vec<T>,
        b_bar: Vec<T>,
        c: Vec<T>,
        x: Vec<T>,
    ) -> Result<Self> {
        let check = |what: &'static str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::dim(what, &[want], &[got]))
            }
        };
        check("ssm a_bar", a_bar.len(), n * heads)?;
        check("ssm b_bar", b_bar.len(), n * heads * state)?;
        check("ssm c", c.len(), n * state)?;
        check("ssm x", x.len(), n * heads * head_dim)?;
        Ok(Self {
            n,
            heads,
            head_dim,
            state,
            a_bar,
            b_bar,
            c,
            x,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Zero-order hold: `Ā[i,j] = exp(Δ[i,j] A[j])`, `B̄[i,j,:] = Δ[i,j] B[i,:]`.
pub fn discretize<T: Scalar>(a: &[T], b: &[T], dt: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let heads = a.len();
    let state = if n == 0 { 0 } else { b.len() / n };
    let mut a_bar = vec![T::zero(); n * heads];
    let mut b_bar = vec![T::zero(); n * heads * state];
    for i in 0..n {
        for j in 0..heads {
            let d = dt[i * heads + j];
            a_bar[i * heads + j] = (d * a[j]).exp();
            let dst = &mut b_bar[(i * heads + j) * state..(i * heads + j + 1) * state];
            for (o, &bv) in dst.iter_mut().zip(&b[i * state..(i + 1) * state]) {
                *o = d * bv;
            }
        }
    }
    (a_bar, b_bar)
}

/// `h_i = Ā_i h_{i-1} + B̄_i x_i`, `y_i = C_i · h_i` per head and channel,
/// from `h_0 = 0`. Output is `n × H × P`.
pub fn traj_ssm_reference<T: Scalar>(inp: &SsmInputs<T>) -> Vec<T> {
    reference_impl(inp, None)
}

/// Reference scan that also writes every state `h_i` (`n × D × N`).
fn reference_impl<T: Scalar>(inp: &SsmInputs<T>, mut states: Option<&mut [T]>) -> Vec<T> {
    let (h_n, p_n, s_n) = (inp.heads, inp.head_dim, inp.state);
    let d = h_n * p_n;
    let mut h = vec![T::zero(); d * s_n];
    let mut y = vec![T::zero(); inp.n * d];
    for i in 0..inp.n {
        let c = &inp.c[i * s_n..(i + 1) * s_n];
        for j in 0..h_n {
            let a = inp.a_bar[i * h_n + j];
            let bb = &inp.b_bar[(i * h_n + j) * s_n..(i * h_n + j + 1) * s_n];
            for p in 0..p_n {
                let col = j * p_n + p;
                let xv = inp.x[i * d + col];
                let hs = &mut h[col * s_n..(col + 1) * s_n];
                let mut acc = T::zero();
                for s in 0..s_n {
                    hs[s] = a * hs[s] + bb[s] * xv;
                    acc += c[s] * hs[s];
                }
                y[i * d + col] = acc;
            }
        }
        if let Some(st) = states.as_deref_mut() {
            st[i * d * s_n..(i + 1) * d * s_n].copy_from_slice(&h);
        }
    }
    y
}

/// Chunked scan: dense intra-chunk contributions plus a state carried
/// between chunks. Same result as [`traj_ssm_reference`].
pub fn traj_ssm_blocked<T: Scalar>(inp: &SsmInputs<T>, chunk: usize) -> Result<Vec<T>> {
    if chunk == 0 {
        return Err(Error::Config("scan chunk must be at least 1".into()));
    }
    let (h_n, p_n, s_n, n) = (inp.heads, inp.head_dim, inp.state, inp.n);
    let d = h_n * p_n;
    let q = chunk.min(n.max(1));
    let mut y = vec![T::zero(); n * d];
    // decay[i][k] = Π_{m=k+1..i} Ā_m within the chunk
    let mut decay = vec![T::zero(); q * q];
    let mut gram = vec![T::zero(); q * q];
    let mut prefix = vec![T::zero(); q];
    let mut ch = vec![T::zero(); p_n];
    for j in 0..h_n {
        // state h[p][s] of this head
        let mut h = vec![T::zero(); p_n * s_n];
        let mut start = 0;
        while start < n {
            let len = q.min(n - start);
            let a_at = |t: usize| inp.a_bar[(start + t) * h_n + j];
            let bb_at = |t: usize| &inp.b_bar[((start + t) * h_n + j) * s_n..((start + t) * h_n + j + 1) * s_n];
            for i in 0..len {
                decay[i * q + i] = T::one();
                for k in (0..i).rev() {
                    decay[i * q + k] = decay[i * q + k + 1] * a_at(k + 1);
                }
                prefix[i] = if i == 0 { a_at(0) } else { prefix[i - 1] * a_at(i) };
                let ci = &inp.c[(start + i) * s_n..(start + i + 1) * s_n];
                for k in 0..=i {
                    let bk = bb_at(k);
                    let mut dot = T::zero();
                    for s in 0..s_n {
                        dot += ci[s] * bk[s];
                    }
                    gram[i * q + k] = dot * decay[i * q + k];
                }
            }
            for i in 0..len {
                let ci = &inp.c[(start + i) * s_n..(start + i + 1) * s_n];
                for (p, slot) in ch.iter_mut().enumerate() {
                    let hp = &h[p * s_n..(p + 1) * s_n];
                    let mut dot = T::zero();
                    for s in 0..s_n {
                        dot += ci[s] * hp[s];
                    }
                    *slot = dot;
                }
                let row = (start + i) * d + j * p_n;
                for p in 0..p_n {
                    let mut acc = prefix[i] * ch[p];
                    for k in 0..=i {
                        acc += gram[i * q + k] * inp.x[(start + k) * d + j * p_n + p];
                    }
                    y[row + p] = acc;
                }
            }
            // carry the state to the chunk end
            let last = len - 1;
            for p in 0..p_n {
                let hp = &mut h[p * s_n..(p + 1) * s_n];
                for v in hp.iter_mut() {
                    *v *= prefix[last];
                }
                for k in 0..len {
                    let w = decay[last * q + k] * inp.x[(start + k) * d + j * p_n + p];
                    for (hv, &bv) in hp.iter_mut().zip(bb_at(k)) {
                        *hv += w * bv;
                    }
                }
            }
            start += len;
        }
    }
    Ok(y)
}

/// How the forward scan is evaluated when no gradient is required.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Reference,
    Blocked(usize),
}

impl ScanMode {
    /// `0` selects the reference recurrence, anything else a chunk size.
    pub fn from_chunk(chunk: usize) -> Self {
        if chunk == 0 {
            ScanMode::Reference
        } else {
            ScanMode::Blocked(chunk)
        }
    }
}

struct SsmOp<T> {
    layout: SeqLayout,
    heads: usize,
    state: usize,
    a_bar: Vec<T>,
    /// `rows × D × N`, zero on padding rows.
    states: Vec<T>,
}

fn sequence_inputs<T: Scalar>(
    x: &[T],
    dt: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: usize,
    heads: usize,
    state: usize,
    r0: usize,
    len: usize,
) -> SsmInputs<T> {
    let (a_bar, b_bar) = discretize(a, &b[r0 * state..(r0 + len) * state], &dt[r0 * heads..(r0 + len) * heads], len);
    SsmInputs {
        n: len,
        heads,
        head_dim: d / heads,
        state,
        a_bar,
        b_bar,
        c: c[r0 * state..(r0 + len) * state].to_vec(),
        x: x[r0 * d..(r0 + len) * d].to_vec(),
    }
}

/// Scan over a packed batch on the tape. Inputs: `x` (`rows × D`), `dt`
/// (`rows × H`, positive), `a` (`H`, negative), `b` and `c` (`rows × N`).
/// Padding rows produce zeros.
pub fn traj_ssm<T: Scalar>(
    tape: &Tape<'_, T>,
    x: Var,
    dt: Var,
    a: Var,
    b: Var,
    c: Var,
    layout: &SeqLayout,
    mode: ScanMode,
) -> Result<Var> {
    let (xs, dts, as_, bs, cs) = (tape.shape(x), tape.shape(dt), tape.shape(a), tape.shape(b), tape.shape(c));
    let rows = layout.rows();
    let heads = as_.iter().product::<usize>();
    if xs.len() != 2 || xs[0] != rows || heads == 0 || xs[1] % heads != 0 {
        return Err(Error::dim("traj_ssm x", &[rows, heads], &xs));
    }
    if dts != [rows, heads] {
        return Err(Error::dim("traj_ssm dt", &[rows, heads], &dts));
    }
    if bs.len() != 2 || bs[0] != rows || bs != cs {
        return Err(Error::dim("traj_ssm b/c", &bs, &cs));
    }
    let d = xs[1];
    let state = bs[1];
    let grad = [x, dt, a, b, c].iter().any(|&v| tape.needs_grad(v));

    let (xv, dtv, av, bv, cv) = (tape.value(x), tape.value(dt), tape.value(a), tape.value(b), tape.value(c));
    let mut y = vec![T::zero(); rows * d];
    let mut a_bar_all = vec![T::zero(); if grad { rows * heads } else { 0 }];
    let mut states = vec![T::zero(); if grad { rows * d * state } else { 0 }];
    for (s, &len) in layout.lens.iter().enumerate() {
        let r0 = s * layout.seq_len;
        if len == 0 {
            continue;
        }
        let inp = sequence_inputs(xv.data(), dtv.data(), av.data(), bv.data(), cv.data(), d, heads, state, r0, len);
        let ys = if grad {
            a_bar_all[r0 * heads..(r0 + len) * heads].copy_from_slice(&inp.a_bar);
            reference_impl(&inp, Some(&mut states[r0 * d * state..(r0 + len) * d * state]))
        } else {
            match mode {
                ScanMode::Reference => traj_ssm_reference(&inp),
                ScanMode::Blocked(q) => traj_ssm_blocked(&inp, q)?,
            }
        };
        y[r0 * d..(r0 + len) * d].copy_from_slice(&ys);
    }
    drop((xv, dtv, av, bv, cv));
    let out = Tensor::new([rows, d], y)?;
    Ok(tape.custom(
        &[x, dt, a, b, c],
        out,
        Box::new(SsmOp {
            layout: layout.clone(),
            heads,
            state,
            a_bar: a_bar_all,
            states,
        }),
    ))
}

impl<T: Scalar> BackwardOp<T> for SsmOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, dy: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, dt, a, b, c) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data(), inputs[4].data());
        let (h_n, s_n) = (self.heads, self.state);
        let d = inputs[0].cols();
        let p_n = d / h_n;
        let mut dx = vec![T::zero(); x.len()];
        let mut ddt = vec![T::zero(); dt.len()];
        let mut da = vec![T::zero(); a.len()];
        let mut db = vec![T::zero(); b.len()];
        let mut dc = vec![T::zero(); c.len()];
        let zeros = vec![T::zero(); d * s_n];
        // adjoint state, D × N
        let mut g = vec![T::zero(); d * s_n];
        for (s, &len) in self.layout.lens.iter().enumerate() {
            let r0 = s * self.layout.seq_len;
            g.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let r = r0 + t;
                let h_cur = &self.states[r * d * s_n..(r + 1) * d * s_n];
                let h_prev = if t > 0 {
                    &self.states[(r - 1) * d * s_n..r * d * s_n]
                } else {
                    &zeros[..]
                };
                let c_r = &c[r * s_n..(r + 1) * s_n];
                let b_r = &b[r * s_n..(r + 1) * s_n];
                for j in 0..h_n {
                    let abar = self.a_bar[r * h_n + j];
                    let delta = dt[r * h_n + j];
                    for p in 0..p_n {
                        let col = j * p_n + p;
                        let dyv = dy[r * d + col];
                        let xv = x[r * d + col];
                        let gs = &mut g[col * s_n..(col + 1) * s_n];
                        let hs = &h_cur[col * s_n..(col + 1) * s_n];
                        let hp = &h_prev[col * s_n..(col + 1) * s_n];
                        let mut bg = T::zero();
                        let mut gh = T::zero();
                        let dxg = delta * xv;
                        for n in 0..s_n {
                            gs[n] += dyv * c_r[n];
                            dc[r * s_n + n] += dyv * hs[n];
                            bg += b_r[n] * gs[n];
                            gh += gs[n] * hp[n];
                            db[r * s_n + n] += dxg * gs[n];
                            gs[n] *= abar;
                        }
                        dx[r * d + col] = delta * bg;
                        ddt[r * h_n + j] += xv * bg + gh * abar * a[j];
                        da[j] += gh * abar * delta;
                    }
                }
            }
        }
        vec![Some(dx), Some(ddt), Some(da), Some(db), Some(dc)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_inputs, project, DEFAULT_STEP};
    use crate::tensor::rng::Rng;

    pub(crate) fn random_inputs(rng: &mut Rng, n: usize, heads: usize, state: usize, p: usize) -> SsmInputs<f64> {
        let a: Vec<f64> = (0..heads).map(|_| -rng.uniform(0.1, 2.0)).collect();
        let dt: Vec<f64> = (0..n * heads).map(|_| rng.uniform(0.01, 1.0)).collect();
        let b: Vec<f64> = (0..n * state).map(|_| rng.normal(0.0, 1.0)).collect();
        let (a_bar, b_bar) = discretize(&a, &b, &dt, n);
        let c = (0..n * state).map(|_| rng.normal(0.0, 1.0)).collect();
        let x = (0..n * heads * p).map(|_| rng.normal(0.0, 1.0)).collect();
        SsmInputs::new(n, heads, p, state, a_bar, b_bar, c, x).unwrap()
    }

    /// `y_i = Σ_{k≤i} C_i (Π_{m=k+1..i} Ā_m) B̄_k x_k`, no recurrence.
    fn unrolled(inp: &SsmInputs<f64>) -> Vec<f64> {
        let (h_n, p_n, s_n) = (inp.heads, inp.head_dim, inp.state);
        let d = h_n * p_n;
        let mut y = vec![0.0; inp.n * d];
        for i in 0..inp.n {
            for j in 0..h_n {
                for p in 0..p_n {
                    let mut acc = 0.0;
                    for k in 0..=i {
                        let mut prod = 1.0;
                        for m in k + 1..=i {
                            prod *= inp.a_bar[m * h_n + j];
                        }
                        let cb: f64 = (0..s_n)
                            .map(|s| inp.c[i * s_n + s] * inp.b_bar[(k * h_n + j) * s_n + s])
                            .sum();
                        acc += prod * cb * inp.x[k * d + j * p_n + p];
                    }
                    y[i * d + j * p_n + p] = acc;
                }
            }
        }
        y
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn discretize_closed_forms() {
        let (a_bar, b_bar) = discretize(&[-1.0], &[2.0, -4.0], &[2f64.ln()], 1);
        assert!((a_bar[0] - 0.5).abs() < 1e-15);
        assert!((b_bar[0] - 2.0 * 2f64.ln()).abs() < 1e-15);
        let (a_bar, b_bar) = discretize::<f64>(&[-3.0], &[5.0], &[1e-300], 1);
        assert_eq!(a_bar[0], 1.0);
        assert!(b_bar[0].abs() < 1e-290);
    }

    #[test]
    fn single_step_and_frozen_state() {
        let mut rng = Rng::new(1, "ssm");
        let inp = random_inputs(&mut rng, 1, 2, 3, 2);
        let y = traj_ssm_reference(&inp);
        for j in 0..2 {
            for p in 0..2 {
                let want: f64 = (0..3).map(|s| inp.c[s] * inp.b_bar[j * 3 + s] * inp.x[j * 2 + p]).sum();
                assert!((y[j * 2 + p] - want).abs() < 1e-14);
            }
        }
        let mut frozen = random_inputs(&mut rng, 6, 1, 2, 2);
        frozen.a_bar.iter_mut().for_each(|v| *v = 1.0);
        frozen.b_bar.iter_mut().for_each(|v| *v = 0.0);
        assert!(traj_ssm_reference(&frozen).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_matches_unrolled_oracle() {
        let mut rng = Rng::new(2, "ssm");
        let inp = random_inputs(&mut rng, 16, 2, 4, 3);
        assert!(max_abs(&traj_ssm_reference(&inp), &unrolled(&inp)) <= 1e-6);
    }

    #[test]
    fn blocked_matches_reference() {
        let mut rng = Rng::new(3, "ssm");
        for (n, chunk) in [(16, 8), (37, 4), (5, 1), (9, 32), (1, 4)] {
            let inp = random_inputs(&mut rng, n, 2, 5, 3);
            let r = traj_ssm_reference(&inp);
            let b = traj_ssm_blocked(&inp, chunk).unwrap();
            assert!(max_abs(&r, &b) <= 1e-12, "n={n} chunk={chunk}");
        }
        let inp = random_inputs(&mut rng, 7, 1, 2, 1);
        assert_eq!(traj_ssm_blocked(&inp, 7).unwrap(), traj_ssm_blocked(&inp, 70).unwrap());
        assert!(traj_ssm_blocked(&inp, 0).is_err());
    }

    #[test]
    fn tape_scan_gradients() {
        let mut rng = Rng::new(4, "ssm-grad");
        for trial in 0..20 {
            let lens = if trial % 2 == 0 { vec![5] } else { vec![4, 2] };
            let layout = SeqLayout::padded(lens);
            let rows = layout.rows();
            let (heads, state, p) = (1 + trial % 2, 1 + trial % 3, 2);
            let d = heads * p;
            let inputs = vec![
                rng.normal_tensor::<f64>(&[rows, d], 1.0),
                Tensor::new([rows, heads], (0..rows * heads).map(|_| rng.uniform(0.1, 1.0)).collect()).unwrap(),
                Tensor::new([heads], (0..heads).map(|_| -rng.uniform(0.2, 1.5)).collect()).unwrap(),
                rng.normal_tensor::<f64>(&[rows, state], 1.0),
                rng.normal_tensor::<f64>(&[rows, state], 1.0),
            ];
            let wrng = Rng::new(trial as u64, "proj");
            let rep = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
                let y = traj_ssm(t, v[0], v[1], v[2], v[3], v[4], &layout, ScanMode::Reference)?;
                project(t, y, &mut wrng.clone())
            })
            .unwrap();
            assert!(rep.max_rel <= 1e-4, "trial {trial}: {rep:?}");
        }
    }
}
