use super::{Graph, NdArray, ParamId, ParamStore, RngState, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.add_glorot(&format!("{name}.w"), &[in_dim, out_dim], in_dim, out_dim, rng)?,
            b: store.add_zeros(&format!("{name}.b"), &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// GRU cell:
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// h̃  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub in_dim: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut w = |gate: &str, rows: usize, rng: &mut RngState| {
            store.add_glorot(&format!("{name}.{gate}"), &[rows, hidden], rows, hidden, rng)
        };
        let w_z = w("w_z", in_dim, rng)?;
        let w_r = w("w_r", in_dim, rng)?;
        let w_h = w("w_h", in_dim, rng)?;
        let u_z = w("u_z", hidden, rng)?;
        let u_r = w("u_r", hidden, rng)?;
        let u_h = w("u_h", hidden, rng)?;
        Ok(GruCell {
            in_dim,
            hidden,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: store.add_zeros(&format!("{name}.b_z"), &[hidden])?,
            b_r: store.add_zeros(&format!("{name}.b_r"), &[hidden])?,
            b_h: store.add_zeros(&format!("{name}.b_h"), &[hidden])?,
        })
    }

    fn gate(
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        h: Var,
        (w, u, b): (ParamId, ParamId, ParamId),
    ) -> Result<Var> {
        let (w, u, b) = (g.param(store, w), g.param(store, u), g.param(store, b));
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add_bias(s, b)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let z_pre = Self::gate(g, store, x, h, (self.w_z, self.u_z, self.b_z))?;
        let z = g.sigmoid(z_pre);
        let r_pre = Self::gate(g, store, x, h, (self.w_r, self.u_r, self.b_r))?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let cand_pre = Self::gate(g, store, x, rh, (self.w_h, self.u_h, self.b_h))?;
        let cand = g.tanh(cand_pre);
        // h + z ⊙ (h̃ − h)
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        g.add(h, upd)
    }
}

/// Evaluates a single GRU step outside of any training graph.
pub fn gru_cell_forward(
    cell: &GruCell,
    store: &ParamStore,
    x_t: &NdArray,
    h_prev: &NdArray,
) -> Result<NdArray> {
    if x_t.shape().len() != 2 || x_t.cols() != cell.in_dim {
        return Err(Error::shape("gru_cell_forward", format!("input {:?}", x_t.shape())));
    }
    if h_prev.shape() != [x_t.rows(), cell.hidden] {
        return Err(Error::shape("gru_cell_forward", format!("state {:?}", h_prev.shape())));
    }
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let h = g.constant(h_prev.clone());
    let out = cell.step(&mut g, store, x, h)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct BiGruLayer {
    pub forward: GruCell,
    pub backward: GruCell,
}

/// Stacked bidirectional GRU. Layer `k > 0` consumes the concatenated
/// forward/backward outputs of layer `k − 1`.
#[derive(Clone, Debug)]
pub struct BiGruStack {
    pub layers: Vec<BiGruLayer>,
    pub hidden: usize,
}

pub struct StackOutput {
    /// Top-layer `[batch, 2H]` outputs, one per time step.
    pub outputs: Vec<Var>,
    /// `[batch, 2·layers·H]`: per layer, last valid forward state then the
    /// backward state after reaching the first position.
    pub final_state: Var,
}

impl BiGruStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let d = if l == 0 { in_dim } else { 2 * hidden };
            out.push(BiGruLayer {
                forward: GruCell::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng)?,
                backward: GruCell::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng)?,
            });
        }
        Ok(BiGruStack { layers: out, hidden })
    }

    pub fn state_width(&self) -> usize {
        2 * self.layers.len() * self.hidden
    }

    /// Runs one direction. Masked rows keep their previous state exactly.
    fn run(
        cell: &GruCell,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
        mask: &[Vec<bool>],
        h0: Var,
        reverse: bool,
    ) -> Result<(Vec<Var>, Var)> {
        let steps = inputs.len();
        let mut outs = vec![h0; steps];
        let mut h = h0;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let m = &mask[t];
            if m.iter().any(|v| *v) {
                let next = cell.step(g, store, inputs[t], h)?;
                h = if m.iter().all(|v| *v) {
                    next
                } else {
                    g.select_rows(m, next, h)?
                };
            }
            outs[t] = h;
        }
        Ok((outs, h))
    }

    /// `inputs[t]` is `[batch, in]`; `mask[t][i]` marks step `t` of row `i` valid.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
        mask: &[Vec<bool>],
    ) -> Result<StackOutput> {
        if inputs.is_empty() || inputs.len() != mask.len() {
            return Err(Error::shape(
                "bi_gru_stack",
                format!("{} inputs, {} mask steps", inputs.len(), mask.len()),
            ));
        }
        let batch = g.value(inputs[0]).rows();
        if mask.iter().any(|m| m.len() != batch) {
            return Err(Error::shape("bi_gru_stack", "mask width differs from batch"));
        }
        let h0 = g.constant(NdArray::zeros(&[batch, self.hidden]));
        let mut layer_in = inputs.to_vec();
        let mut finals = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            let (f_out, f_last) = Self::run(&layer.forward, g, store, &layer_in, mask, h0, false)?;
            let (b_out, b_last) = Self::run(&layer.backward, g, store, &layer_in, mask, h0, true)?;
            finals.push(f_last);
            finals.push(b_last);
            layer_in = f_out
                .iter()
                .zip(&b_out)
                .map(|(f, b)| g.concat_cols(&[*f, *b]))
                .collect::<Result<_>>()?;
        }
        let final_state = g.concat_cols(&finals)?;
        Ok(StackOutput {
            outputs: layer_in,
            final_state,
        })
    }
}
