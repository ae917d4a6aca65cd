//! Standard LSTM cell and bidirectional sequence runner.
//!
//! Gate blocks are packed into one `4h x d` matrix in the fixed order
//! input, forget, cell-candidate, output. The forget-gate bias block is
//! initialized to 1.0; every other parameter entry is drawn uniformly
//! from the configured init range.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gate block order within the packed `4h`-row parameter matrices.
pub const GATE_ORDER: [&str; 4] = ["input", "forget", "cell", "output"];

/// Parameters of one LSTM cell, generic over the value holder so the same
/// struct describes both stored tensors and graph-bound variables.
#[derive(Debug, Clone)]
pub struct LstmParams<T> {
    /// Input-to-gates matrix, `4h x d_in`.
    pub w_x: T,
    /// Hidden-to-gates matrix, `4h x h`.
    pub w_h: T,
    /// Gate bias, `1 x 4h`.
    pub b: T,
}

impl LstmParams<Tensor> {
    /// Draws parameters uniformly from `[-range, range]`, then overwrites the
    /// forget-gate bias block with 1.0.
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, range: f64) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let values = (0..rows * cols).map(|_| rng.gen_range(-range..=range)).collect();
            Tensor::new(vec![rows, cols], values).expect("positive dims")
        };
        let w_x = uniform(4 * hidden, in_dim);
        let w_h = uniform(4 * hidden, hidden);
        let mut b = uniform(1, 4 * hidden);
        for i in hidden..2 * hidden {
            b.values_mut()[i] = 1.0;
        }
        LstmParams { w_x, w_h, b }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.shape()[1]
    }
}

impl<T> LstmParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w_x"), &self.w_x));
        out.push((format!("{prefix}.w_h"), &self.w_h));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w_x"), &mut self.w_x));
        out.push((format!("{prefix}.w_h"), &mut self.w_h));
        out.push((format!("{prefix}.b"), &mut self.b));
    }

    pub fn map<U, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<LstmParams<U>, E> {
        Ok(LstmParams {
            w_x: f(&format!("{prefix}.w_x"), &self.w_x)?,
            w_h: f(&format!("{prefix}.w_h"), &self.w_h)?,
            b: f(&format!("{prefix}.b"), &self.b)?,
        })
    }
}

/// One step of the cell. `output` and `hidden` are the same value; both are
/// returned because downstream consumers read them under different roles.
pub struct LstmStep {
    pub output: Var,
    pub hidden: Var,
    pub cell: Var,
}

/// Applies the gate equations to one input row.
///
/// `x: 1 x d`, `h_prev: 1 x h`, `c_prev: 1 x h`.
pub fn lstm_step(x: &Var, h_prev: &Var, c_prev: &Var, params: &LstmParams<Var>) -> Result<LstmStep> {
    let four_h = params.w_x.rows();
    let h = four_h / 4;
    if x.cols() != params.w_x.cols() {
        return Err(Error::shape(
            "lstm_step",
            format!("input [1, {}]", params.w_x.cols()),
            format!("[{}, {}]", x.rows(), x.cols()),
        ));
    }
    if h_prev.cols() != h || c_prev.cols() != h {
        return Err(Error::shape(
            "lstm_step",
            format!("state [1, {h}]"),
            format!("h [1, {}], c [1, {}]", h_prev.cols(), c_prev.cols()),
        ));
    }
    let gates = x
        .matmul_nt(&params.w_x)?
        .add(&h_prev.matmul_nt(&params.w_h)?)?
        .add(&params.b)?;
    let input_gate = gates.slice_cols(0, h)?.sigmoid();
    let forget_gate = gates.slice_cols(h, h)?.sigmoid();
    let candidate = gates.slice_cols(2 * h, h)?.tanh();
    let output_gate = gates.slice_cols(3 * h, h)?.sigmoid();
    let cell = forget_gate.mul(c_prev)?.add(&input_gate.mul(&candidate)?)?;
    let hidden = output_gate.mul(&cell.tanh())?;
    Ok(LstmStep {
        output: hidden.clone(),
        hidden,
        cell,
    })
}

/// Runs a single direction over the rows of `sequence`, returning one
/// `1 x h` output per step in input order. Initial states are zero.
pub fn unidirectional(sequence: &Var, params: &LstmParams<Var>, reverse: bool) -> Result<Vec<Var>> {
    let n = sequence.rows();
    let h = params.w_h.cols();
    let mut hidden = sequence.constant_like(Tensor::zeros(1, h));
    let mut cell = hidden.clone();
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    let mut outputs = vec![None; n];
    for t in order {
        let x = sequence.slice_rows(t, 1)?;
        let step = lstm_step(&x, &hidden, &cell, params)?;
        hidden = step.hidden;
        cell = step.cell;
        outputs[t] = Some(step.output);
    }
    Ok(outputs.into_iter().map(|o| o.expect("all steps visited")).collect())
}

/// Runs forward and backward passes over an `n x d` sequence and returns the
/// per-step concatenation `[fwd_t, bwd_t]` as an `n x 2h` matrix.
pub fn bilstm_run(sequence: &Var, fwd: &LstmParams<Var>, bwd: &LstmParams<Var>) -> Result<Var> {
    let g = sequence.graph();
    let n = sequence.rows();
    let fwd_outputs = unidirectional(sequence, fwd, false)?;
    let bwd_outputs = unidirectional(sequence, bwd, true)?;
    let mut joined = Vec::with_capacity(n);
    for t in 0..n {
        joined.push(g.concat_cols(&[fwd_outputs[t].clone(), bwd_outputs[t].clone()])?);
    }
    g.concat_rows(&joined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::SeedableRng;

    fn bind(g: &Graph, p: &LstmParams<Tensor>) -> LstmParams<Var> {
        p.map::<_, crate::error::Error>("lstm", &mut |_, t| Ok(g.leaf(t.clone(), true)))
            .unwrap()
    }

    fn zero_params(in_dim: usize, h: usize) -> LstmParams<Tensor> {
        LstmParams {
            w_x: Tensor::zeros(4 * h, in_dim),
            w_h: Tensor::zeros(4 * h, h),
            b: Tensor::zeros(1, 4 * h),
        }
    }

    #[test]
    fn zero_parameters_give_zero_hidden() {
        let g = Graph::new();
        let p = bind(&g, &zero_params(3, 2));
        let x = g.constant(Tensor::row(vec![0.4, -1.2, 7.0]).unwrap());
        let h0 = g.zeros(1, 2);
        let c0 = g.zeros(1, 2);
        let step = lstm_step(&x, &h0, &c0, &p).unwrap();
        assert_eq!(step.hidden.values(), vec![0.0, 0.0]);
        assert_eq!(step.output.values(), step.hidden.values());
    }

    #[test]
    fn zero_input_zero_state_zero_bias_gives_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LstmParams::init(&mut rng, 3, 2, 0.08);
        p.b = Tensor::zeros(1, 8);
        let g = Graph::new();
        let pv = bind(&g, &p);
        let x = g.zeros(1, 3);
        let h0 = g.zeros(1, 2);
        let c0 = g.zeros(1, 2);
        let step = lstm_step(&x, &h0, &c0, &pv).unwrap();
        // candidate tanh(0) = 0, so cell = 0 and hidden = gate * tanh(0) = 0
        assert_eq!(step.hidden.values(), vec![0.0, 0.0]);
        assert_eq!(step.cell.values(), vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_cell_matches_hand_evaluated_gates() {
        // h = 1: pick simple weights and evaluate every gate by hand.
        // gates = x*w + h*u + b with x = 0.5, h_prev = -0.2, c_prev = 0.3
        let w = [0.1, 0.2, 0.3, 0.4]; // input, forget, cell, output rows of w_x
        let u = [-0.5, 0.6, -0.7, 0.8];
        let b = [0.01, 0.02, 0.03, 0.04];
        let (x, h_prev, c_prev) = (0.5, -0.2, 0.3);

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let z: Vec<f64> = (0..4).map(|k| x * w[k] + h_prev * u[k] + b[k]).collect();
        let (i, f, c_hat, o) = (sig(z[0]), sig(z[1]), z[2].tanh(), sig(z[3]));
        let c_expect = f * c_prev + i * c_hat;
        let h_expect = o * c_expect.tanh();

        let g = Graph::new();
        let p = LstmParams {
            w_x: g.constant(Tensor::new(vec![4, 1], w.to_vec()).unwrap()),
            w_h: g.constant(Tensor::new(vec![4, 1], u.to_vec()).unwrap()),
            b: g.constant(Tensor::row(b.to_vec()).unwrap()),
        };
        let step = lstm_step(
            &g.constant(Tensor::scalar(x)),
            &g.constant(Tensor::scalar(h_prev)),
            &g.constant(Tensor::scalar(c_prev)),
            &p,
        )
        .unwrap();
        assert!((step.cell.values()[0] - c_expect).abs() < 1e-15);
        assert!((step.hidden.values()[0] - h_expect).abs() < 1e-15);
    }

    #[test]
    fn hidden_stays_inside_tanh_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LstmParams::init(&mut rng, 4, 3, 0.08);
        let g = Graph::new();
        let pv = bind(&g, &p);
        let mut h = g.zeros(1, 3);
        let mut c = g.zeros(1, 3);
        for _ in 0..20 {
            let x = g.constant(Tensor::row((0..4).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap());
            let step = lstm_step(&x, &h, &c, &pv).unwrap();
            h = step.hidden;
            c = step.cell;
            assert!(h.values().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = Graph::new();
        let p = bind(&g, &zero_params(3, 2));
        let x = g.zeros(1, 5);
        let h0 = g.zeros(1, 2);
        let c0 = g.zeros(1, 2);
        assert!(lstm_step(&x, &h0, &c0, &p).is_err());
    }

    #[test]
    fn bilstm_single_element_concats_both_directions_on_same_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fwd = LstmParams::init(&mut rng, 3, 2, 0.08);
        let bwd = LstmParams::init(&mut rng, 3, 2, 0.08);
        let g = Graph::new();
        let fv = bind(&g, &fwd);
        let bv = bind(&g, &bwd);
        let seq = g.constant(Tensor::new(vec![1, 3], vec![0.3, -0.4, 0.9]).unwrap());
        let out = bilstm_run(&seq, &fv, &bv).unwrap();
        assert_eq!(out.shape(), vec![1, 4]);

        let x = seq.slice_rows(0, 1).unwrap();
        let zero = g.zeros(1, 2);
        let f = lstm_step(&x, &zero, &zero, &fv).unwrap();
        let b = lstm_step(&x, &zero, &zero, &bv).unwrap();
        let expect: Vec<f64> = f.output.values().into_iter().chain(b.output.values()).collect();
        assert_eq!(out.values(), expect);
    }

    #[test]
    fn palindrome_with_shared_params_reverses_under_half_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LstmParams::init(&mut rng, 2, 3, 0.08);
        let g = Graph::new();
        let pv = bind(&g, &p);
        let seq = g.constant(
            Tensor::from_rows(&[vec![0.1, 0.9], vec![-0.5, 0.2], vec![0.1, 0.9]]).unwrap(),
        );
        let out = bilstm_run(&seq, &pv, &pv).unwrap();
        let v = out.values();
        let h = 3;
        // output_t = [fwd_t, bwd_t]; on a palindrome with shared params
        // fwd_t == bwd_{n-1-t}, so swapping halves reverses the sequence.
        let n = 3;
        for t in 0..n {
            let fwd_t = &v[t * 2 * h..t * 2 * h + h];
            let bwd_mirror = &v[(n - 1 - t) * 2 * h + h..(n - 1 - t) * 2 * h + 2 * h];
            for (a, b) in fwd_t.iter().zip(bwd_mirror) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilstm_equals_two_independent_unidirectional_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fwd = LstmParams::init(&mut rng, 3, 2, 0.08);
        let bwd = LstmParams::init(&mut rng, 3, 2, 0.08);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let g = Graph::new();
        let fv = bind(&g, &fwd);
        let bv = bind(&g, &bwd);
        let seq = g.constant(Tensor::from_rows(&rows).unwrap());
        let out = bilstm_run(&seq, &fv, &bv).unwrap();

        let f_out = unidirectional(&seq, &fv, false).unwrap();
        let b_out = unidirectional(&seq, &bv, true).unwrap();
        for t in 0..3 {
            let row = &out.values()[t * 4..(t + 1) * 4];
            let expect: Vec<f64> = f_out[t].values().into_iter().chain(b_out[t].values()).collect();
            assert_eq!(row, &expect[..]);
        }
    }

    #[test]
    fn unrolled_lstm_gradients_match_finite_differences() {
        use crate::gradcheck::{finite_difference_check, GradMap};
        use std::collections::BTreeMap;

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let init = LstmParams::init(&mut rng, 2, 3, 0.08);
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut params = BTreeMap::new();
        params.insert("lstm.w_x".to_string(), init.w_x);
        params.insert("lstm.w_h".to_string(), init.w_h);
        params.insert("lstm.b".to_string(), init.b);

        let report = finite_difference_check(&mut params, 1e-5, 1e-4, |p, want| {
            let g = Graph::new();
            let pv = LstmParams {
                w_x: g.leaf(p["lstm.w_x"].clone(), true),
                w_h: g.leaf(p["lstm.w_h"].clone(), true),
                b: g.leaf(p["lstm.b"].clone(), true),
            };
            let mut h = g.zeros(1, 3);
            let mut c = g.zeros(1, 3);
            let mut total = g.constant(Tensor::scalar(0.0));
            for row in &inputs {
                let x = g.constant(Tensor::row(row.clone()).unwrap());
                let step = lstm_step(&x, &h, &c, &pv)?;
                h = step.hidden;
                c = step.cell;
                total = total.add(&h.tanh().sum_all())?;
            }
            let value = total.item()?;
            if want {
                total.backward()?;
                let mut m = GradMap::new();
                m.insert("lstm.w_x".into(), pv.w_x.grad().unwrap());
                m.insert("lstm.w_h".into(), pv.w_h.grad().unwrap());
                m.insert("lstm.b".into(), pv.b.grad().unwrap());
                Ok((value, Some(m)))
            } else {
                Ok((value, None))
            }
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn forget_bias_block_is_one_rest_within_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::init(&mut rng, 5, 4, 0.08);
        let b = p.b.values();
        for (i, v) in b.iter().enumerate() {
            if (4..8).contains(&i) {
                assert_eq!(*v, 1.0);
            } else {
                assert!(v.abs() <= 0.08);
            }
        }
        assert!(p.w_x.values().iter().all(|v| v.abs() <= 0.08));
        assert!(p.w_h.values().iter().all(|v| v.abs() <= 0.08));
    }
}
