//! Standard LSTM cell with exact backpropagation through time, plus the
//! bidirectional wrapper that concatenates forward and reverse passes.

/// One direction of an LSTM. The combined gate weight is row-major
/// `[4·hidden × (input + hidden)]` acting on `[x_t ; h_{t-1}]`; gate rows
/// are ordered input / forget / cell-candidate / output:
/// rows `0..h` → i (sigmoid), `h..2h` → f (sigmoid), `2h..3h` → g (tanh),
/// `3h..4h` → o (sigmoid). Then `c_t = f∘c_{t-1} + i∘g`, `h_t = o∘tanh(c_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    pub input: usize,
    pub hidden: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-step activations kept for BPTT. Gates are stored post-activation.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub xs: Vec<Vec<f64>>,
    /// Per step: `[i, f, g, o]` concatenated, each `hidden` wide.
    pub gates: Vec<Vec<f64>>,
    pub cells: Vec<Vec<f64>>,
    pub tanh_cells: Vec<Vec<f64>>,
    pub hiddens: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmDirection {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Runs the recurrence left to right over `xs` (T × input), starting
    /// from zero hidden and cell state.
    pub fn forward(&self, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, LstmCache) {
        let t_len = xs.len();
        let h = self.hidden;
        let cols = self.input + h;
        let mut gates = Vec::with_capacity(t_len);
        let mut cells = Vec::with_capacity(t_len);
        let mut tanh_cells = Vec::with_capacity(t_len);
        let mut hiddens = Vec::with_capacity(t_len);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for x in xs {
            // pre[r] = b[r] + W[r]·[x ; h_prev]
            let mut gate = vec![0.0; 4 * h];
            for (r, g) in gate.iter_mut().enumerate() {
                let row = &self.weight[r * cols..(r + 1) * cols];
                let mut acc = self.bias[r];
                for (c, &xv) in x.iter().enumerate() {
                    acc += row[c] * xv;
                }
                for (c, &hv) in h_prev.iter().enumerate() {
                    acc += row[self.input + c] * hv;
                }
                *g = acc;
            }
            for r in 0..4 * h {
                gate[r] = if r / h == 2 { gate[r].tanh() } else { sigmoid(gate[r]) };
            }
            let mut c_t = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            let mut h_t = vec![0.0; h];
            for k in 0..h {
                c_t[k] = gate[h + k] * c_prev[k] + gate[k] * gate[2 * h + k];
                tanh_c[k] = c_t[k].tanh();
                h_t[k] = gate[3 * h + k] * tanh_c[k];
            }
            gates.push(gate);
            cells.push(c_t.clone());
            tanh_cells.push(tanh_c);
            hiddens.push(h_t.clone());
            c_prev = c_t;
            h_prev = h_t;
        }
        (
            hiddens.clone(),
            LstmCache {
                xs: xs.to_vec(),
                gates,
                cells,
                tanh_cells,
                hiddens,
            },
        )
    }

    /// BPTT given `dhs` = ∂loss/∂h_t for every step; returns parameter
    /// gradients and ∂loss/∂x_t.
    pub fn backward(&self, cache: &LstmCache, dhs: &[Vec<f64>]) -> (LstmGrads, Vec<Vec<f64>>) {
        let t_len = cache.xs.len();
        let h = self.hidden;
        let cols = self.input + h;
        let mut dweight = vec![0.0; self.weight.len()];
        let mut dbias = vec![0.0; self.bias.len()];
        let mut dxs = vec![vec![0.0; self.input]; t_len];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..t_len).rev() {
            let gate = &cache.gates[t];
            let c_prev: &[f64] = if t == 0 { &[] } else { &cache.cells[t - 1] };
            // Pre-activation gate gradients, same [i,f,g,o] layout.
            let mut da = vec![0.0; 4 * h];
            for k in 0..h {
                let dh = dhs[t][k] + dh_next[k];
                let (i, f, g, o) = (gate[k], gate[h + k], gate[2 * h + k], gate[3 * h + k]);
                let tanh_c = cache.tanh_cells[t][k];
                let dc = dh * o * (1.0 - tanh_c * tanh_c) + dc_next[k];
                let cp = if t == 0 { 0.0 } else { c_prev[k] };
                da[k] = dc * g * i * (1.0 - i);
                da[h + k] = dc * cp * f * (1.0 - f);
                da[2 * h + k] = dc * i * (1.0 - g * g);
                da[3 * h + k] = dh * tanh_c * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            let x = &cache.xs[t];
            let h_prev: &[f64] = if t == 0 { &[] } else { &cache.hiddens[t - 1] };
            for k in 0..h {
                dh_next[k] = 0.0;
            }
            for r in 0..4 * h {
                let g = da[r];
                if g == 0.0 {
                    continue;
                }
                dbias[r] += g;
                let wrow = &self.weight[r * cols..(r + 1) * cols];
                let drow = &mut dweight[r * cols..(r + 1) * cols];
                for c in 0..self.input {
                    drow[c] += g * x[c];
                    dxs[t][c] += g * wrow[c];
                }
                for c in 0..h {
                    let hp = if t == 0 { 0.0 } else { h_prev[c] };
                    drow[self.input + c] += g * hp;
                    dh_next[c] += g * wrow[self.input + c];
                }
            }
        }
        (LstmGrads { dweight, dbias }, dxs)
    }
}

/// Bidirectional layer: the reverse direction runs the same recurrence on
/// the time-reversed sequence and its outputs are un-reversed, so output
/// frame `t` is `[h_fwd[t] ; h_bwd[t]]`, width `2·hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmLayer {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

#[derive(Debug, Clone)]
pub struct BlstmCache {
    pub fwd: LstmCache,
    /// Cache of the reverse direction, indexed in reversed time.
    pub bwd: LstmCache,
}

#[derive(Debug, Clone)]
pub struct BlstmGrads {
    pub fwd: LstmGrads,
    pub bwd: LstmGrads,
}

impl BlstmLayer {
    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn param_count(&self) -> usize {
        self.fwd.param_count() + self.bwd.param_count()
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, BlstmCache) {
        let (hf, cache_f) = self.fwd.forward(xs);
        let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let (hb_rev, cache_b) = self.bwd.forward(&reversed);
        let h = self.hidden();
        let t_len = xs.len();
        let mut out = vec![vec![0.0; 2 * h]; t_len];
        for t in 0..t_len {
            out[t][..h].copy_from_slice(&hf[t]);
            out[t][h..].copy_from_slice(&hb_rev[t_len - 1 - t]);
        }
        (
            out,
            BlstmCache {
                fwd: cache_f,
                bwd: cache_b,
            },
        )
    }

    pub fn backward(&self, cache: &BlstmCache, dout: &[Vec<f64>]) -> (BlstmGrads, Vec<Vec<f64>>) {
        let h = self.hidden();
        let t_len = dout.len();
        let dh_f: Vec<Vec<f64>> = dout.iter().map(|row| row[..h].to_vec()).collect();
        // Reverse the upstream gradient into the reverse direction's time.
        let dh_b: Vec<Vec<f64>> = dout.iter().rev().map(|row| row[h..].to_vec()).collect();
        let (gf, dx_f) = self.fwd.backward(&cache.fwd, &dh_f);
        let (gb, dx_b_rev) = self.bwd.backward(&cache.bwd, &dh_b);
        let mut dx = dx_f;
        for t in 0..t_len {
            let rev = &dx_b_rev[t_len - 1 - t];
            for (c, d) in dx[t].iter_mut().enumerate() {
                *d += rev[c];
            }
        }
        (BlstmGrads { fwd: gf, bwd: gb }, dx)
    }
}
