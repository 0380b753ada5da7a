use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::Offsets;
use crate::error::{Error, Result};

/// One affine layer, `y = W x + b`, with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Fully-connected regression head over RoI-pooled features.
///
/// Layers are joined by rectifiers; the last layer is linear and emits the
/// four offsets `(tx, ty, tw, th)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    pool_size: usize,
    channels: usize,
    layers: Vec<Dense>,
}

/// Activations kept from a batched forward pass for backpropagation.
pub struct ForwardCache {
    /// Layer inputs, starting with the pooled features.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Pre-activations of each layer, one row per input.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }

    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl RegressorModel {
    pub fn from_layers(pool_size: usize, channels: usize, layers: Vec<Dense>) -> Result<Self> {
        if pool_size == 0 || channels == 0 || layers.is_empty() {
            return Err(Error::InvalidConfig("empty regressor architecture".into()));
        }
        let expected = channels * pool_size * pool_size;
        if layers[0].inputs() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: layers[0].inputs(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].outputs(),
                    actual: pair[1].inputs(),
                });
            }
            if pair[0].bias.len() != pair[0].outputs() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].outputs(),
                    actual: pair[0].bias.len(),
                });
            }
        }
        let last = layers.last().unwrap();
        if last.outputs() != 4 || last.bias.len() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                actual: last.outputs(),
            });
        }
        Ok(RegressorModel {
            pool_size,
            channels,
            layers,
        })
    }

    /// All-zero weights: every box is refined to itself.
    pub fn zeros(pool_size: usize, channels: usize, hidden: &[usize]) -> Result<Self> {
        let widths = Self::widths_for(pool_size, channels, hidden);
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self::from_layers(pool_size, channels, layers)
    }

    /// Zero-mean Gaussian weights with standard deviation `std`, zero biases.
    pub fn init_gaussian<R: Rng + ?Sized>(
        pool_size: usize,
        channels: usize,
        hidden: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(format!("init std {std}: {e}")))?;
        let mut model = Self::zeros(pool_size, channels, hidden)?;
        for layer in &mut model.layers {
            layer.weights.iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        Ok(model)
    }

    fn widths_for(pool_size: usize, channels: usize, hidden: &[usize]) -> Vec<usize> {
        let mut widths = vec![channels * pool_size * pool_size];
        widths.extend_from_slice(hidden);
        widths.push(4);
        widths
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// `[input, hidden..., 4]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, features: &[f64]) -> Result<Offsets> {
        if features.len() != self.input_width() {
            return Err(Error::DimensionMismatch {
                expected: self.input_width(),
                actual: features.len(),
            });
        }
        let x = ArrayView2::from_shape((1, features.len()), features).expect("contiguous row");
        let out = self.forward_batch(x)?;
        let row = out.output().row(0);
        Ok(Offsets::new(row[0], row[1], row[2], row[3]))
    }

    /// Forward a `batch x input_width` feature matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_width() {
            return Err(Error::DimensionMismatch {
                expected: self.input_width(),
                actual: x.ncols(),
            });
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        inputs.push(x.to_owned());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = inputs[k].dot(&layer.weights.t()) + &layer.bias;
            if k + 1 < n_layers {
                inputs.push(z.mapv(|v| v.max(0.0)));
            }
            pre.push(z);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Parameter gradients given `d loss / d output` for every row of the batch.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.to_owned();
        for k in (0..self.layers.len()).rev() {
            let dw = delta.t().dot(&cache.inputs[k]);
            let db = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut d_in = delta.dot(&self.layers[k].weights);
                d_in.zip_mut_with(&cache.pre[k - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = d_in;
            }
            grads.push(Dense { weights: dw, bias: db });
        }
        grads.reverse();
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_outputs_zero() {
        let m = RegressorModel::zeros(7, 3, &[256, 256]).unwrap();
        assert_eq!(m.input_width(), 147);
        assert_eq!(m.forward(&vec![0.3; 147]).unwrap(), Offsets::ZERO);
    }

    #[test]
    fn hand_computed_toy_network() {
        // 2 inputs -> 2 -> 2 -> 4 along a single path with one negative unit.
        let l1 = Dense {
            weights: array![[1.0, 0.0], [0.0, -1.0]],
            bias: array![0.5, 0.0],
        };
        let l2 = Dense {
            weights: array![[2.0, 0.0], [0.0, 1.0]],
            bias: array![0.0, 1.0],
        };
        let l3 = Dense {
            weights: array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]],
            bias: array![0.0, 0.0, 0.0, 0.25],
        };
        let m = RegressorModel::from_layers(1, 2, vec![l1, l2, l3]).unwrap();
        // z1 = (2.5, -3) -> a1 = (2.5, 0); z2 = (5, 1) -> a2 = (5, 1)
        let out = m.forward(&[2.0, 3.0]).unwrap();
        assert_eq!(out, Offsets::new(5.0, 1.0, 6.0, -4.75));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = RegressorModel::zeros(2, 1, &[3]).unwrap();
        assert!(matches!(m.forward(&[1.0; 5]), Err(Error::DimensionMismatch { .. })));
        let bad = vec![Dense::zeros(3, 2), Dense::zeros(2, 4)];
        assert!(RegressorModel::from_layers(2, 1, bad).is_err());
        let bad_out = vec![Dense::zeros(4, 2), Dense::zeros(2, 3)];
        assert!(RegressorModel::from_layers(2, 1, bad_out).is_err());
    }

    #[test]
    fn fresh_init_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..147).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x: Vec<f64> = x.iter().map(|v| v / norm).collect();
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let m = RegressorModel::init_gaussian(7, 3, &[256, 256], 0.001, &mut rng).unwrap();
            let o = m.forward(&x).unwrap();
            worst = worst.max(o.to_array().iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
        assert!(worst < 0.1, "{worst}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = RegressorModel::init_gaussian(1, 3, &[5, 4], 0.7, &mut rng).unwrap();
        let x = array![[0.3, -1.2, 0.8], [1.1, 0.4, -0.6]];
        // Loss = sum(out * c) for a fixed c, so d_out = c.
        let c = array![[0.5, -1.0, 2.0, 0.25], [1.5, 0.5, -0.5, 1.0]];
        let loss = |m: &RegressorModel| (m.forward_batch(x.view()).unwrap().output() * &c).sum();
        let grads = m.backward(&m.forward_batch(x.view()).unwrap(), c.view());
        let h = 1e-6;
        for (k, g) in grads.iter().enumerate() {
            for idx in 0..g.weights.len() {
                let (r, col) = (idx / g.weights.ncols(), idx % g.weights.ncols());
                let mut p = m.clone();
                p.layers[k].weights[[r, col]] += h;
                let mut q = m.clone();
                q.layers[k].weights[[r, col]] -= h;
                let num = (loss(&p) - loss(&q)) / (2.0 * h);
                assert!((num - g.weights[[r, col]]).abs() < 1e-6);
            }
            for r in 0..g.bias.len() {
                let mut p = m.clone();
                p.layers[k].bias[r] += h;
                let mut q = m.clone();
                q.layers[k].bias[r] -= h;
                let num = (loss(&p) - loss(&q)) / (2.0 * h);
                assert!((num - g.bias[r]).abs() < 1e-6);
            }
        }
    }
}
