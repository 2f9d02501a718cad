//! Small reusable model pieces: dense maps and an LSTM cell, expressed as
//! named parameters plus tape-building helpers.

use rand::Rng;

use crate::num::init::{lstm_bias, orthogonal_blocks, xavier_uniform};
use crate::num::{NodeId, NumResult, ParamStore, Session, Tensor};

/// Fully-connected layer `x @ w + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    w: String,
    b: String,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = format!("{}.w", prefix);
        let b = format!("{}.b", prefix);
        store.insert(&w, xavier_uniform(rng, input_dim, output_dim));
        store.insert(&b, Tensor::zeros(&[output_dim]));
        Dense {
            w,
            b,
            input_dim,
            output_dim,
        }
    }

    /// Handles for a layer whose parameters already exist in the store.
    pub fn named(store: &ParamStore, prefix: &str) -> Self {
        let w = format!("{}.w", prefix);
        let b = format!("{}.b", prefix);
        let shape = store.get(&w).value.shape().to_vec();
        Dense {
            w,
            b,
            input_dim: shape[0],
            output_dim: shape[1],
        }
    }

    pub fn apply(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> NumResult<NodeId> {
        let w = sess.param(store, &self.w);
        let b = sess.param(store, &self.b);
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add(y, b)
    }
}

/// Single LSTM cell. Gate layout is input, forget, cell, output; the forget
/// bias starts at 1.0.
#[derive(Clone, Debug)]
pub struct LstmCell {
    wx: String,
    wh: String,
    b: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Hidden and cell state handles for one step.
pub type LstmState = (NodeId, NodeId);

impl LstmCell {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wx = format!("{}.wx", prefix);
        let wh = format!("{}.wh", prefix);
        let b = format!("{}.b", prefix);
        store.insert(&wx, xavier_uniform(rng, input_dim, 4 * hidden_dim));
        store.insert(&wh, orthogonal_blocks(rng, hidden_dim, 4));
        store.insert(&b, lstm_bias(hidden_dim));
        LstmCell {
            wx,
            wh,
            b,
            input_dim,
            hidden_dim,
        }
    }

    pub fn named(store: &ParamStore, prefix: &str) -> Self {
        let wx = format!("{}.wx", prefix);
        let wh = format!("{}.wh", prefix);
        let b = format!("{}.b", prefix);
        let shape = store.get(&wx).value.shape().to_vec();
        LstmCell {
            wx,
            wh,
            b,
            input_dim: shape[0],
            hidden_dim: shape[1] / 4,
        }
    }

    pub fn zero_state(&self, sess: &mut Session) -> LstmState {
        let h = sess.constant(Tensor::zeros(&[1, self.hidden_dim]));
        let c = sess.constant(Tensor::zeros(&[1, self.hidden_dim]));
        (h, c)
    }

    /// One step: consumes `x` of shape `[1, input_dim]` and the previous
    /// state, returns the next `(h, c)`.
    pub fn step(
        &self,
        sess: &mut Session,
        store: &ParamStore,
        x: NodeId,
        state: LstmState,
    ) -> NumResult<LstmState> {
        let (h_prev, c_prev) = state;
        let wx = sess.param(store, &self.wx);
        let wh = sess.param(store, &self.wh);
        let b = sess.param(store, &self.b);
        let hd = self.hidden_dim;
        let zx = sess.tape.matmul(x, wx)?;
        let zh = sess.tape.matmul(h_prev, wh)?;
        let z0 = sess.tape.add(zx, zh)?;
        let z = sess.tape.add(z0, b)?;
        let i_raw = sess.tape.slice(z, 1, 0, hd)?;
        let f_raw = sess.tape.slice(z, 1, hd, 2 * hd)?;
        let g_raw = sess.tape.slice(z, 1, 2 * hd, 3 * hd)?;
        let o_raw = sess.tape.slice(z, 1, 3 * hd, 4 * hd)?;
        let i = sess.tape.sigmoid(i_raw);
        let f = sess.tape.sigmoid(f_raw);
        let g = sess.tape.tanh(g_raw);
        let o = sess.tape.sigmoid(o_raw);
        let fc = sess.tape.mul(f, c_prev)?;
        let ig = sess.tape.mul(i, g)?;
        let c = sess.tape.add(fc, ig)?;
        let ct = sess.tape.tanh(c);
        let h = sess.tape.mul(o, ct)?;
        Ok((h, c))
    }
}
