//! 1-D convolution over time with same-padding, stride 1, and ReLU.

/// Time convolution: input `T × in_ch`, output `T × out_ch`. The kernel is
/// odd so same-padding keeps the frame count unchanged, which keeps CTC
/// frame alignment trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// Row-major `[out_ch][in_ch][kernel]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Forward-pass intermediates needed for the exact backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Vec<Vec<f64>>,
    /// Pre-activation outputs; the ReLU mask is `pre > 0`.
    pub pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

impl ConvLayer {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn w(&self, o: usize, c: usize, j: usize) -> f64 {
        self.weight[(o * self.in_ch + c) * self.kernel + j]
    }

    /// ReLU(conv(x)); returns activations and the cache for backward.
    pub fn forward(&self, input: &[Vec<f64>]) -> (Vec<Vec<f64>>, ConvCache) {
        let t_len = input.len();
        let pad = self.kernel / 2;
        let mut pre = vec![vec![0.0; self.out_ch]; t_len];
        for t in 0..t_len {
            for o in 0..self.out_ch {
                let mut acc = self.bias[o];
                for j in 0..self.kernel {
                    let src = t + j;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    let x = &input[src - pad];
                    for c in 0..self.in_ch {
                        acc += self.w(o, c, j) * x[c];
                    }
                }
                pre[t][o] = acc;
            }
        }
        let out = pre
            .iter()
            .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
            .collect();
        (
            out,
            ConvCache {
                input: input.to_vec(),
                pre,
            },
        )
    }

    /// Exact gradients; `dx` is computed only when a layer below needs it.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &[Vec<f64>],
        need_dx: bool,
    ) -> (ConvGrads, Option<Vec<Vec<f64>>>) {
        let t_len = cache.input.len();
        let pad = self.kernel / 2;
        let mut dweight = vec![0.0; self.weight.len()];
        let mut dbias = vec![0.0; self.out_ch];
        let mut dx = if need_dx {
            Some(vec![vec![0.0; self.in_ch]; t_len])
        } else {
            None
        };
        for t in 0..t_len {
            for o in 0..self.out_ch {
                if cache.pre[t][o] <= 0.0 {
                    continue; // ReLU gate closed
                }
                let g = dout[t][o];
                dbias[o] += g;
                for j in 0..self.kernel {
                    let src = t + j;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    let x = &cache.input[src - pad];
                    for c in 0..self.in_ch {
                        dweight[(o * self.in_ch + c) * self.kernel + j] += g * x[c];
                    }
                    if let Some(dx) = dx.as_mut() {
                        for c in 0..self.in_ch {
                            dx[src - pad][c] += g * self.w(o, c, j);
                        }
                    }
                }
            }
        }
        (ConvGrads { dweight, dbias }, dx)
    }
}
