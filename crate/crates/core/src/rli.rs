//! Residual-aware low-order interaction layer.
//!
//! Three pathways per layer: a low-rank bilinear block that pairs the
//! layer-1 embeddings with the current state, a high-rank bilinear block
//! over the current state alone, and a dense implicit block. The layer
//! output is later combined with its input by a gated residual.

use rand::Rng;

use crate::error::{DlfError, Result};
use crate::tensor::{ParamId, Scalar, Tape, Var};

/// Weight and bias of a per-field dense map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `W_I` (R x d), `W_O` (d x d) and `b` (d) of one bilinear block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BilinearParams {
    pub inner: ParamId,
    pub outer: ParamId,
    pub bias: ParamId,
}

/// Parameter handles for one layer. `low` is `None` when the low-rank block
/// is ablated, in which case `low_dense` stands in for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RliLayerParams {
    pub low: Option<BilinearParams>,
    pub low_dense: Option<DenseParams>,
    pub high: BilinearParams,
    pub implicit: DenseParams,
    pub gate: Option<ParamId>,
}

/// Outputs of the three pathways, each `[B, N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct RliOutputs {
    pub low: Var,
    pub high: Var,
    pub implicit: Var,
}

impl RliOutputs {
    pub fn as_array(&self) -> [Var; 3] {
        [self.low, self.high, self.implicit]
    }
}

fn dims<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(v) {
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(DlfError::shape(format!("expected [batch, fields, dim], got {s:?}"))),
    }
}

/// Rank-R bilinear interaction of `a` with `b` (both `[B, N, d]`):
/// `K = W_I^T W_I`, `S = a K b^T / sqrt(d)`, `H = S b / N`,
/// output `relu(H W_O^T + bias)`.
pub fn bilinear_interact<T: Scalar>(
    tape: &mut Tape<'_, T>,
    a: Var,
    b: Var,
    inner: Var,
    outer: Var,
    bias: Var,
) -> Result<Var> {
    let (_, n, d) = dims(tape, a)?;
    if tape.shape(a) != tape.shape(b) {
        return Err(DlfError::shape(format!(
            "bilinear inputs {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    match *tape.shape(inner) {
        [r, dd] if dd == d && r >= 1 => {}
        ref s => return Err(DlfError::shape(format!("inner weight {s:?} must be [R, {d}]"))),
    }
    let inner_t = tape.transpose(inner)?;
    let kernel = tape.matmul(inner_t, inner)?;
    // kernel is symmetric, so a * kernel^T == a * kernel
    let ak = tape.linear(a, kernel, None)?;
    let scores = tape.batch_matmul(ak, b, false, true, T::of(1.0 / (d as f64).sqrt()))?;
    let mixed = tape.batch_matmul(scores, b, false, false, T::of(1.0 / n as f64))?;
    let out = tape.linear(mixed, outer, Some(bias))?;
    Ok(tape.relu(out))
}

/// `relu(e W_D^T + b_D)` with weights shared across fields.
pub fn implicit_block<T: Scalar>(tape: &mut Tape<'_, T>, e: Var, weight: Var, bias: Var) -> Result<Var> {
    let h = tape.linear(e, weight, Some(bias))?;
    Ok(tape.relu(h))
}

/// `z + max(e W_Gate^T, eps) * e`. Returns the output and the gate tensor.
pub fn gated_residual<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, e: Var, gate: Var, eps: f64) -> Result<(Var, Var)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(DlfError::config(format!("gate floor must be positive, got {eps}")));
    }
    if tape.shape(z) != tape.shape(e) {
        return Err(DlfError::shape(format!(
            "residual of {:?} onto {:?}",
            tape.shape(z),
            tape.shape(e)
        )));
    }
    let pre = tape.linear(e, gate, None)?;
    let g = tape.max_scalar(pre, T::of(eps));
    let scaled = tape.mul(g, e)?;
    Ok((tape.add(z, scaled)?, g))
}

/// Dropout settings for one forward pass.
pub struct Dropout<'r, R> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'r mut R,
}

/// Runs the three pathways of one layer. `e1` is the embedding output, `el`
/// the current layer state.
pub fn rli_layer<T: Scalar, R: Rng>(
    tape: &mut Tape<'_, T>,
    e1: Var,
    el: Var,
    params: &RliLayerParams,
    dropout: &mut Dropout<'_, R>,
) -> Result<RliOutputs> {
    let low = match (params.low, params.low_dense) {
        (Some(p), _) => {
            let (i, o, b) = (tape.param(p.inner), tape.param(p.outer), tape.param(p.bias));
            bilinear_interact(tape, e1, el, i, o, b)?
        }
        (None, Some(p)) => {
            let (w, b) = (tape.param(p.weight), tape.param(p.bias));
            implicit_block(tape, el, w, b)?
        }
        (None, None) => return Err(DlfError::Contract("layer has no low-order pathway".into())),
    };
    let high = {
        let p = params.high;
        let (i, o, b) = (tape.param(p.inner), tape.param(p.outer), tape.param(p.bias));
        bilinear_interact(tape, el, el, i, o, b)?
    };
    let implicit = {
        let (w, b) = (tape.param(params.implicit.weight), tape.param(params.implicit.bias));
        implicit_block(tape, el, w, b)?
    };
    let mut drop = |v| tape.dropout(v, dropout.rate, dropout.training, dropout.rng);
    Ok(RliOutputs { low: drop(low)?, high: drop(high)?, implicit: drop(implicit)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape<'_, f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(Tensor::from_f64(shape, data).unwrap(), true)
    }

    #[test]
    fn zero_input_gives_relu_bias() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.leaf(Tensor::zeros(&[2, 3, 4]), false);
        let wi = tape.leaf(Tensor::full(&[2, 4], 0.3), false);
        let wo = tape.leaf(Tensor::full(&[4, 4], -0.7), false);
        let b = leaf(&mut tape, &[4], &[1.0, -2.0, 0.5, 0.0]);
        let z = bilinear_interact(&mut tape, a, a, wi, wo, b).unwrap();
        for row in tape.value(z).data().chunks(4) {
            assert_eq!(row, &[1.0, 0.0, 0.5, 0.0]);
        }
    }

    #[test]
    fn single_field_closed_form() {
        let mut tape = Tape::<f64>::detached();
        let e = leaf(&mut tape, &[1, 1, 4], &[2.0, 0.0, 0.0, 0.0]);
        let eye = tape.leaf(Tensor::eye(4), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let z = bilinear_interact(&mut tape, e, e, eye, eye, b).unwrap();
        assert_eq!(tape.value(z).data(), &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_rejects_mismatched_inputs() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 4]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 3, 4]), false);
        let wi = tape.leaf(Tensor::zeros(&[2, 4]), false);
        let wo = tape.leaf(Tensor::zeros(&[4, 4]), false);
        let bias = tape.leaf(Tensor::zeros(&[4]), false);
        assert!(matches!(bilinear_interact(&mut tape, a, b, wi, wo, bias), Err(DlfError::Shape(_))));
        let wrong_inner = tape.leaf(Tensor::zeros(&[2, 5]), false);
        assert!(matches!(bilinear_interact(&mut tape, a, a, wrong_inner, wo, bias), Err(DlfError::Shape(_))));
    }

    #[test]
    fn implicit_identity_and_clipping() {
        let mut tape = Tape::<f64>::detached();
        let e = leaf(&mut tape, &[1, 2, 2], &[0.5, 1.5, 0.0, 3.0]);
        let eye = tape.leaf(Tensor::eye(2), false);
        let zero = tape.leaf(Tensor::zeros(&[2]), false);
        let z = implicit_block(&mut tape, e, eye, zero).unwrap();
        assert_eq!(tape.value(z), tape.value(e));

        let neg = leaf(&mut tape, &[1, 2, 2], &[-1.0, 0.0, 0.0, -1.0]);
        let z = implicit_block(&mut tape, neg, eye, zero).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_cases() {
        let mut tape = Tape::<f64>::detached();
        let z = leaf(&mut tape, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let e = leaf(&mut tape, &[1, 2, 2], &[0.5, -1.0, 2.0, 0.25]);
        let zero_gate = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let (out, g) = gated_residual(&mut tape, z, e, zero_gate, 0.01).unwrap();
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().zip([0.5, -1.0, 2.0, 0.25]).map(|(z, e)| z + 0.01 * e).collect();
        assert_eq!(tape.value(out).data(), expect.as_slice());
        assert!(tape.value(g).data().iter().all(|&v| v == 0.01));

        // floor inactive: positive e with a large identity gate
        let pos = leaf(&mut tape, &[1, 1, 2], &[1.0, 2.0]);
        let zz = tape.leaf(Tensor::zeros(&[1, 1, 2]), false);
        let big = tape.leaf(Tensor::from_f64(&[2, 2], &[10.0, 0.0, 0.0, 10.0]).unwrap(), false);
        let (out, _) = gated_residual(&mut tape, zz, pos, big, 0.01).unwrap();
        assert_eq!(tape.value(out).data(), &[10.0, 40.0]);

        let zeros = tape.leaf(Tensor::zeros(&[1, 1, 2]), false);
        let (out, _) = gated_residual(&mut tape, zeros, zeros, big, 0.01).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);

        assert!(matches!(gated_residual(&mut tape, zeros, zeros, big, 0.0), Err(DlfError::Config(_))));
    }

    #[test]
    fn residual_carries_gradient_when_weights_vanish() {
        let mut tape = Tape::<f64>::detached();
        let z = tape.leaf(Tensor::zeros(&[1, 2, 3]), false);
        let e = leaf(&mut tape, &[1, 2, 3], &[0.3, -0.2, 0.9, 1.1, -0.4, 0.05]);
        let gate = tape.leaf(Tensor::zeros(&[3, 3]), false);
        let (out, _) = gated_residual(&mut tape, z, e, gate, 0.01).unwrap();
        let loss = tape.sum(out);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(e).unwrap().data().iter().all(|&v| (v - 0.01).abs() < 1e-15));
    }

    #[test]
    fn dropout_is_applied_only_in_training() {
        use crate::tensor::ParamStore;
        let mut store = ParamStore::<f64>::new();
        let mut add = |name: &str, shape: &[usize], v: f64| store.insert(name, Tensor::full(shape, v)).unwrap();
        let bil = |add: &mut dyn FnMut(&str, &[usize], f64) -> ParamId, p: &str| BilinearParams {
            inner: add(&format!("{p}.i"), &[2, 4], 0.2),
            outer: add(&format!("{p}.o"), &[4, 4], 0.1),
            bias: add(&format!("{p}.b"), &[4], 0.5),
        };
        let low = bil(&mut add, "low");
        let high = bil(&mut add, "high");
        let implicit = DenseParams { weight: add("d.w", &[4, 4], 0.1), bias: add("d.b", &[4], 0.5) };
        let params = RliLayerParams { low: Some(low), low_dense: None, high, implicit, gate: None };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = |training: bool, rng: &mut ChaCha8Rng| {
            let mut tape = Tape::new(&store);
            let e = tape.leaf(Tensor::full(&[3, 5, 4], 0.4), false);
            let mut d = Dropout { rate: 0.5, training, rng };
            let out = rli_layer(&mut tape, e, e, &params, &mut d).unwrap();
            tape.value(out.implicit).clone()
        };
        let eval = run(false, &mut rng);
        let train = run(true, &mut rng);
        assert!(eval.data().iter().all(|&v| v > 0.0));
        assert!(train.data().contains(&0.0));
    }
}
