//! Fully-connected layers applied frame-wise, with optional ReLU.

/// `y_t = W·x_t + b` per frame; `relu` is false only for the final
/// 28-unit output layer, whose raw scores feed the CTC softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub input: usize,
    pub output: usize,
    pub relu: bool,
    /// Row-major `[output × input]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FcCache {
    pub input: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

impl FcLayer {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &[Vec<f64>]) -> (Vec<Vec<f64>>, FcCache) {
        let mut pre = Vec::with_capacity(input.len());
        for x in input {
            let mut row = vec![0.0; self.output];
            for (o, out) in row.iter_mut().enumerate() {
                let wrow = &self.weight[o * self.input..(o + 1) * self.input];
                let mut acc = self.bias[o];
                for (c, &xv) in x.iter().enumerate() {
                    acc += wrow[c] * xv;
                }
                *out = acc;
            }
            pre.push(row);
        }
        let out = if self.relu {
            pre.iter()
                .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
                .collect()
        } else {
            pre.clone()
        };
        (
            out,
            FcCache {
                input: input.to_vec(),
                pre,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &FcCache,
        dout: &[Vec<f64>],
        need_dx: bool,
    ) -> (FcGrads, Option<Vec<Vec<f64>>>) {
        let t_len = cache.input.len();
        let mut dweight = vec![0.0; self.weight.len()];
        let mut dbias = vec![0.0; self.output];
        let mut dx = if need_dx {
            Some(vec![vec![0.0; self.input]; t_len])
        } else {
            None
        };
        for t in 0..t_len {
            let x = &cache.input[t];
            for o in 0..self.output {
                if self.relu && cache.pre[t][o] <= 0.0 {
                    continue;
                }
                let g = dout[t][o];
                if g == 0.0 {
                    continue;
                }
                dbias[o] += g;
                let wrow = &self.weight[o * self.input..(o + 1) * self.input];
                let drow = &mut dweight[o * self.input..(o + 1) * self.input];
                for c in 0..self.input {
                    drow[c] += g * x[c];
                }
                if let Some(dx) = dx.as_mut() {
                    for c in 0..self.input {
                        dx[t][c] += g * wrow[c];
                    }
                }
            }
        }
        (FcGrads { dweight, dbias }, dx)
    }
}
