//! Bi-directional LSTM encoder and the affine emission layer.
//!
//! Parameters live in a [`ParamStore`] under a caller-chosen prefix:
//! `{prefix}.fwd.w_ih` (`4h×d`), `{prefix}.fwd.w_hh` (`4h×h`),
//! `{prefix}.fwd.b` (`4h`) and the same for `bwd`. Gate rows are ordered
//! input, forget, cell, output.

use rand::Rng;

use crate::autodiff::{glorot_uniform, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Graph handles for one direction's weights.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_ih = g.param(store, &format!("{prefix}.w_ih"))?;
        let w_hh = g.param(store, &format!("{prefix}.w_hh"))?;
        let b = g.param(store, &format!("{prefix}.b"))?;
        let hidden = g.value(w_hh).cols();
        if g.value(w_hh).rows() != 4 * hidden || g.value(b).numel() != 4 * hidden {
            return Err(Error::dim("lstm weights", g.value(w_hh).shape(), g.value(b).shape()));
        }
        Ok(LstmVars { w_ih, w_hh, b, hidden })
    }
}

fn init_direction<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w_ih"), glorot_uniform(rng, &[4 * hidden, input], input, 4 * hidden));
    store.insert(format!("{prefix}.w_hh"), glorot_uniform(rng, &[4 * hidden, hidden], hidden, 4 * hidden));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]));
}

/// Registers both directions of a Bi-LSTM under `prefix`.
pub fn init_bilstm<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    init_direction(store, &format!("{prefix}.fwd"), input, hidden, rng);
    init_direction(store, &format!("{prefix}.bwd"), input, hidden, rng);
}

/// Registers `{prefix}.w_out` (`K×input`) and `{prefix}.b_out` (`K`).
pub fn init_emission<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, num_tags: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w_out"), glorot_uniform(rng, &[num_tags, input], input, num_tags));
    store.insert(format!("{prefix}.b_out"), Tensor::zeros(&[num_tags]));
}

/// Gate arithmetic given the pre-activation `z = x·W_ihᵀ + h·W_hhᵀ + b`.
fn cell_from_preactivation(g: &mut Graph, z: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let both = g.lstm_cell(z, c)?;
    let h_next = g.slice_cols(both, 0, hidden)?;
    let c_next = g.slice_cols(both, hidden, 2 * hidden)?;
    Ok((h_next, c_next))
}

/// One LSTM step on row vectors `x: 1×d`, `h, c: 1×h`.
pub fn lstm_cell_step(g: &mut Graph, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var)> {
    let hs = g.value(h).shape().to_vec();
    if hs != [1, w.hidden] || g.value(c).shape() != hs.as_slice() {
        return Err(Error::dim("lstm state", &hs, g.value(c).shape()));
    }
    let xp = g.matmul_nt(x, w.w_ih)?;
    let hp = g.matmul_nt(h, w.w_hh)?;
    let sum = g.add(xp, hp)?;
    let z = g.add_row(sum, w.b)?;
    cell_from_preactivation(g, z, c, w.hidden)
}

/// Runs one direction over `x: T×d`, returning `T×h` in input order.
pub fn run_direction(g: &mut Graph, x: Var, w: &LstmVars, reverse: bool) -> Result<Var> {
    let t = g.value(x).rows();
    let xw = g.matmul_nt(x, w.w_ih)?;
    let proj = g.add_row(xw, w.b)?;
    let mut h = g.constant(Tensor::zeros(&[1, w.hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, w.hidden]));
    let mut outputs = vec![h; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in order {
        let xr = g.row(proj, step)?;
        let hp = g.matmul_nt(h, w.w_hh)?;
        let z = g.add(xr, hp)?;
        let (h_next, c_next) = cell_from_preactivation(g, z, c, w.hidden)?;
        outputs[step] = h_next;
        h = h_next;
        c = c_next;
    }
    g.concat_rows(&outputs)
}

/// `T×d → T×2h`: forward states then backward states per position.
pub fn bilstm_encode(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    if g.value(x).shape().len() != 2 {
        return Err(Error::dim("bilstm input", g.value(x).shape(), &[0, 0]));
    }
    let fwd = LstmVars::bind(g, store, &format!("{prefix}.fwd"))?;
    let bwd = LstmVars::bind(g, store, &format!("{prefix}.bwd"))?;
    let d = g.value(fwd.w_ih).cols();
    if g.value(x).cols() != d {
        return Err(Error::dim("bilstm input", g.value(x).shape(), g.value(fwd.w_ih).shape()));
    }
    let hf = run_direction(g, x, &fwd, false)?;
    let hb = run_direction(g, x, &bwd, true)?;
    g.concat_cols(&[hf, hb])
}

/// Affine projection `hidden·W_outᵀ + b_out` giving raw `T×K` scores.
pub fn emission_scores(g: &mut Graph, store: &ParamStore, prefix: &str, hidden: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w_out"))?;
    let b = g.param(store, &format!("{prefix}.b_out"))?;
    let scores = g.matmul_nt(hidden, w)?;
    g.add_row(scores, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_store(d: usize, h: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_bilstm(&mut store, "enc", d, h, &mut rng);
        // nonzero biases so the oracle sees every term
        for dir in ["fwd", "bwd"] {
            let b = store.get_mut(&format!("enc.{dir}.b")).unwrap();
            for v in b.values_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        store
    }

    /// Plain scalar-loop LSTM cell.
    fn oracle_cell(x: &[f64], h: &[f64], c: &[f64], w_ih: &Tensor, w_hh: &Tensor, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hid = h.len();
        let mut z = vec![0.0; 4 * hid];
        for r in 0..4 * hid {
            let mut acc = b[r];
            for (k, xv) in x.iter().enumerate() {
                acc += w_ih.at(r, k) * xv;
            }
            for (k, hv) in h.iter().enumerate() {
                acc += w_hh.at(r, k) * hv;
            }
            z[r] = acc;
        }
        let mut h2 = vec![0.0; hid];
        let mut c2 = vec![0.0; hid];
        for u in 0..hid {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[hid + u]);
            let gg = z[2 * hid + u].tanh();
            let o = sigmoid(z[3 * hid + u]);
            c2[u] = f * c[u] + i * gg;
            h2[u] = o * c2[u].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn zero_everything_gives_zero_state() {
        let mut store = ParamStore::new();
        store.insert("l.w_ih", Tensor::zeros(&[8, 3]));
        store.insert("l.w_hh", Tensor::zeros(&[8, 2]));
        store.insert("l.b", Tensor::zeros(&[8]));
        let mut g = Graph::new();
        let w = LstmVars::bind(&mut g, &store, "l").unwrap();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let (h2, c2) = lstm_cell_step(&mut g, x, h, c, &w).unwrap();
        assert_eq!(g.value(h2).values(), &[0.0, 0.0]);
        assert_eq!(g.value(c2).values(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let hid = 2;
        let mut b = vec![0.0; 4 * hid];
        b[hid..2 * hid].fill(30.0);
        b[..hid].fill(-30.0);
        let mut store = ParamStore::new();
        store.insert("l.w_ih", Tensor::zeros(&[8, 1]));
        store.insert("l.w_hh", Tensor::zeros(&[8, 2]));
        store.insert("l.b", Tensor::new(vec![8], b).unwrap());
        let mut g = Graph::new();
        let w = LstmVars::bind(&mut g, &store, "l").unwrap();
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let c = g.constant(Tensor::matrix(1, 2, vec![0.7, -1.3]).unwrap());
        let (_, c2) = lstm_cell_step(&mut g, x, h, c, &w).unwrap();
        assert!((g.value(c2).values()[0] - 0.7).abs() < 1e-12);
        assert!((g.value(c2).values()[1] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let store = random_store(5, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let w = LstmVars::bind(&mut g, &store, "enc.fwd").unwrap();
        let xv = g.constant(Tensor::matrix(1, 5, x.clone()).unwrap());
        let hv = g.constant(Tensor::matrix(1, 3, h.clone()).unwrap());
        let cv = g.constant(Tensor::matrix(1, 3, c.clone()).unwrap());
        let (h2, c2) = lstm_cell_step(&mut g, xv, hv, cv, &w).unwrap();
        let (eh, ec) = oracle_cell(
            &x,
            &h,
            &c,
            store.get("enc.fwd.w_ih").unwrap(),
            store.get("enc.fwd.w_hh").unwrap(),
            store.get("enc.fwd.b").unwrap().values(),
        );
        for (a, b) in g.value(h2).values().iter().zip(&eh) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(c2).values().iter().zip(&ec) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_sentence() {
        let store = random_store(4, 3, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let h = bilstm_encode(&mut g, &store, "enc", x).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 6]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut store = ParamStore::new();
        for dir in ["fwd", "bwd"] {
            store.insert(format!("enc.{dir}.w_ih"), Tensor::zeros(&[8, 3]));
            store.insert(format!("enc.{dir}.w_hh"), Tensor::zeros(&[8, 2]));
            store.insert(format!("enc.{dir}.b"), Tensor::zeros(&[8]));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap());
        let h = bilstm_encode(&mut g, &store, "enc", x).unwrap();
        assert!(g.value(h).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tied_directions_mirror_on_palindromes() {
        let mut store = random_store(3, 2, 5);
        for name in ["w_ih", "w_hh", "b"] {
            let t = store.get(&format!("enc.fwd.{name}")).unwrap().clone();
            store.insert(format!("enc.bwd.{name}"), t);
        }
        let rows = [vec![0.3, -0.2, 0.9], vec![-0.5, 0.1, 0.4], vec![0.3, -0.2, 0.9]];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let out = bilstm_encode(&mut g, &store, "enc", x).unwrap();
        let out = g.value(out);
        let t = 3;
        for r in 0..t {
            let row = out.row(r);
            let mirror = out.row(t - 1 - r);
            assert!((row[0] - mirror[2]).abs() < 1e-12 && (row[1] - mirror[3]).abs() < 1e-12);
            assert!((row[2] - mirror[0]).abs() < 1e-12 && (row[3] - mirror[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn emission_shape_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_emission(&mut store, "emit", 4, 9, &mut rng);
        let mut g = Graph::new();
        let hidden = g.constant(Tensor::zeros(&[3, 4]));
        let p = emission_scores(&mut g, &store, "emit", hidden).unwrap();
        assert_eq!(g.value(p).shape(), &[3, 9]);
        assert!(g.value(p).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let store = random_store(4, 2, 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(bilstm_encode(&mut g, &store, "enc", x), Err(Error::Dimension { .. })));
    }
}
