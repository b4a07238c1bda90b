use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub vocab_size: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl DecoderShape {
    fn sizes(&self) -> [usize; 7] {
        let (v, d, h) = (self.vocab_size, self.input_dim, self.hidden_dim);
        [v * d, d * 3 * h, 3 * h, h * 3 * h, 3 * h, h * v, v]
    }

    pub fn parameter_count(&self) -> usize {
        self.sizes().iter().sum()
    }
}

/// Single-layer GRU language model over character tokens. The first
/// `prefix_len` inputs are prefix vectors; later inputs are token embeddings.
/// Gates are ordered reset, update, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDecoder {
    pub(crate) embed: Array2<f32>,
    pub(crate) w_x: Array2<f32>,
    pub(crate) b_x: Array1<f32>,
    pub(crate) w_h: Array2<f32>,
    pub(crate) b_h: Array1<f32>,
    pub(crate) w_out: Array2<f32>,
    pub(crate) b_out: Array1<f32>,
}

struct Step {
    x: Array2<f32>,
    r: Array2<f32>,
    z: Array2<f32>,
    n: Array2<f32>,
    gh_n: Array2<f32>,
    h: Array2<f32>,
}

/// Summed token loss of a batch and, on request, gradients of the mean loss.
pub(crate) struct BatchResult {
    pub loss_sum: f64,
    pub tokens: usize,
    pub grads: Option<(GruDecoder, Array3<f32>)>,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl GruDecoder {
    pub fn zeros(shape: DecoderShape) -> Self {
        let (v, d, h) = (shape.vocab_size, shape.input_dim, shape.hidden_dim);
        Self {
            embed: Array2::zeros((v, d)),
            w_x: Array2::zeros((d, 3 * h)),
            b_x: Array1::zeros(3 * h),
            w_h: Array2::zeros((h, 3 * h)),
            b_h: Array1::zeros(3 * h),
            w_out: Array2::zeros((h, v)),
            b_out: Array1::zeros(v),
        }
    }

    /// Uniform in `±1/sqrt(hidden_dim)` for every tensor.
    pub fn random(shape: DecoderShape, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (shape.hidden_dim as f32).sqrt();
        let mut model = Self::zeros(shape);
        for tensor in model.tensors_mut() {
            tensor.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        model
    }

    pub fn shape(&self) -> DecoderShape {
        DecoderShape {
            vocab_size: self.embed.nrows(),
            input_dim: self.embed.ncols(),
            hidden_dim: self.w_h.nrows(),
        }
    }

    pub fn tensors(&self) -> [&[f32]; 7] {
        [
            self.embed.as_slice().expect("standard layout"),
            self.w_x.as_slice().expect("standard layout"),
            self.b_x.as_slice().expect("standard layout"),
            self.w_h.as_slice().expect("standard layout"),
            self.b_h.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_out.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f32]; 7] {
        [
            self.embed.as_slice_mut().expect("standard layout"),
            self.w_x.as_slice_mut().expect("standard layout"),
            self.b_x.as_slice_mut().expect("standard layout"),
            self.w_h.as_slice_mut().expect("standard layout"),
            self.b_h.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_out.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Rebuild from the concatenation of [`tensors`](Self::tensors).
    pub fn from_flat(shape: DecoderShape, flat: &[f32]) -> Result<Self, TrainError> {
        if flat.len() != shape.parameter_count() {
            return Err(TrainError::Checkpoint(format!(
                "decoder expects {} parameters, found {}",
                shape.parameter_count(),
                flat.len()
            )));
        }
        let mut model = Self::zeros(shape);
        let mut rest = flat;
        for (tensor, size) in model.tensors_mut().into_iter().zip(shape.sizes()) {
            let (head, tail) = rest.split_at(size);
            tensor.copy_from_slice(head);
            rest = tail;
        }
        Ok(model)
    }

    fn cell(&self, x: Array2<f32>, h_prev: &Array2<f32>) -> Step {
        let hd = self.w_h.nrows();
        let gx = x.dot(&self.w_x) + &self.b_x;
        let gh = h_prev.dot(&self.w_h) + &self.b_h;
        let r = (&gx.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd])).mapv(sigmoid);
        let z = (&gx.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd])).mapv(sigmoid);
        let gh_n = gh.slice(s![.., 2 * hd..]).to_owned();
        let n = (&gx.slice(s![.., 2 * hd..]) + &(&r * &gh_n)).mapv(f32::tanh);
        let h = &n + &(&z * &(h_prev - &n));
        Step { x, r, z, n, gh_n, h }
    }

    fn embed_rows(&self, tokens: impl Iterator<Item = u32>) -> Array2<f32> {
        let rows: Vec<_> = tokens.map(|t| self.embed.row(t as usize)).collect();
        ndarray::stack(Axis(0), &rows).expect("equal widths")
    }

    /// Teacher-forced pass over a batch. `prefixes` is `[batch, prefix_len,
    /// input_dim]`; each target ends with the end token and must be non-empty.
    /// Only target tokens contribute to the loss; padding is masked out.
    pub(crate) fn run_batch(&self, prefixes: ArrayView3<f32>, targets: &[Vec<u32>], want_grads: bool) -> BatchResult {
        let (batch, k, _) = prefixes.dim();
        assert_eq!(batch, targets.len());
        let hd = self.w_h.nrows();
        let vocab = self.embed.nrows();
        let lmax = targets.iter().map(Vec::len).max().unwrap_or(0);
        assert!(k > 0 && lmax > 0 && targets.iter().all(|t| !t.is_empty()));
        let pad = targets[0][targets[0].len() - 1];
        let steps = k + lmax - 1;

        let mut h_prev = Array2::zeros((batch, hd));
        let mut h_first = Vec::with_capacity(if want_grads { 1 } else { 0 });
        let mut cache: Vec<Step> = Vec::with_capacity(steps);
        let mut outputs = Array2::<f32>::zeros((lmax * batch, hd));
        for s in 0..steps {
            let x = if s < k {
                prefixes.slice(s![.., s, ..]).to_owned()
            } else {
                let j = s - k;
                self.embed_rows(targets.iter().map(|t| if j + 1 < t.len() { t[j] } else { pad }))
            };
            let step = self.cell(x, &h_prev);
            if s + 1 >= k {
                let j = s + 1 - k;
                outputs.slice_mut(s![j * batch..(j + 1) * batch, ..]).assign(&step.h);
            }
            let h_next = step.h.clone();
            if want_grads {
                if s == 0 {
                    h_first.push(h_prev);
                }
                cache.push(step);
            }
            h_prev = h_next;
        }

        let mut logits = outputs.dot(&self.w_out) + &self.b_out;
        let mut loss_sum = 0.0f64;
        let mut tokens = 0usize;
        for (row, mut logit) in logits.axis_iter_mut(Axis(0)).enumerate() {
            let (j, b) = (row / batch, row % batch);
            let target = targets[b].get(j).copied();
            let max = logit.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let log_z = f64::from(max) + logit.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
            match target {
                Some(t) => {
                    loss_sum += log_z - f64::from(logit[t as usize]);
                    tokens += 1;
                    if want_grads {
                        logit.mapv_inplace(|v| (f64::from(v) - log_z).exp() as f32);
                        logit[t as usize] -= 1.0;
                    }
                }
                None => logit.fill(0.0),
            }
        }
        if !want_grads {
            return BatchResult {
                loss_sum,
                tokens,
                grads: None,
            };
        }

        let scale = 1.0 / tokens as f32;
        let dlogits = logits * scale;
        let mut g = Self::zeros(self.shape());
        g.w_out = outputs.t().dot(&dlogits);
        g.b_out = dlogits.sum_axis(Axis(0));
        let d_outputs = dlogits.dot(&self.w_out.t());
        let mut d_prefix = Array3::<f32>::zeros(prefixes.dim());
        let mut dh = Array2::<f32>::zeros((batch, hd));
        for s in (0..steps).rev() {
            if s + 1 >= k {
                let j = s + 1 - k;
                dh += &d_outputs.slice(s![j * batch..(j + 1) * batch, ..]);
            }
            let step = &cache[s];
            let h_prev = if s == 0 { &h_first[0] } else { &cache[s - 1].h };
            let dn = &dh * &step.z.mapv(|z| 1.0 - z);
            let dz = &dh * &(h_prev - &step.n);
            let da_n = &dn * &step.n.mapv(|n| 1.0 - n * n);
            let dr = &da_n * &step.gh_n;
            let da_r = &dr * &step.r.mapv(|r| r * (1.0 - r));
            let da_z = &dz * &step.z.mapv(|z| z * (1.0 - z));

            let mut dgx = Array2::<f32>::zeros((batch, 3 * hd));
            dgx.slice_mut(s![.., 0..hd]).assign(&da_r);
            dgx.slice_mut(s![.., hd..2 * hd]).assign(&da_z);
            dgx.slice_mut(s![.., 2 * hd..]).assign(&da_n);
            let mut dgh = dgx.clone();
            dgh.slice_mut(s![.., 2 * hd..]).assign(&(&da_n * &step.r));

            g.w_x += &step.x.t().dot(&dgx);
            g.b_x += &dgx.sum_axis(Axis(0));
            g.w_h += &h_prev.t().dot(&dgh);
            g.b_h += &dgh.sum_axis(Axis(0));
            let dx = dgx.dot(&self.w_x.t());
            if s < k {
                d_prefix.slice_mut(s![.., s, ..]).assign(&dx);
            } else {
                let j = s - k;
                for (b, t) in targets.iter().enumerate() {
                    if j + 1 < t.len() {
                        let mut row = g.embed.row_mut(t[j] as usize);
                        row += &dx.row(b);
                    }
                }
            }
            dh = &dh * &step.z + &dgh.dot(&self.w_h.t());
        }
        debug_assert_eq!(g.embed.nrows(), vocab);
        BatchResult {
            loss_sum,
            tokens,
            grads: Some((g, d_prefix)),
        }
    }

    /// Greedy decoding from a `[prefix_len, input_dim]` prefix until `eos`
    /// or `max_len` tokens. Ties go to the lowest token id.
    pub fn greedy(&self, prefix: &Array2<f32>, eos: u32, max_len: usize) -> Vec<u32> {
        let mut h = Array2::zeros((1, self.w_h.nrows()));
        for row in prefix.rows() {
            h = self.cell(row.to_owned().insert_axis(Axis(0)), &h).h;
        }
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = h.row(0).dot(&self.w_out) + &self.b_out;
            let (best, _) = logits
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let token = best as u32;
            if token == eos {
                break;
            }
            out.push(token);
            h = self.cell(self.embed_rows(std::iter::once(token)), &h).h;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> DecoderShape {
        DecoderShape {
            vocab_size: 7,
            input_dim: 3,
            hidden_dim: 4,
        }
    }

    fn setup() -> (GruDecoder, Array3<f32>, Vec<Vec<u32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = GruDecoder::random(shape(), &mut rng);
        model.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v *= 3.0));
        let prefixes = Array3::from_shape_simple_fn((3, 2, 3), || rng.random_range(-1.0..1.0));
        let targets = vec![vec![1, 2, 3, 6], vec![4, 6], vec![0, 5, 5, 2, 6]];
        (model, prefixes, targets)
    }

    fn mean_loss(model: &GruDecoder, prefixes: &Array3<f32>, targets: &[Vec<u32>]) -> f64 {
        let r = model.run_batch(prefixes.view(), targets, false);
        r.loss_sum / r.tokens as f64
    }

    fn close(numeric: f64, analytic: f64) -> bool {
        (numeric - analytic).abs() <= 2e-3 + 2e-2 * analytic.abs()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (model, prefixes, targets) = setup();
        let result = model.run_batch(prefixes.view(), &targets, true);
        assert_eq!(result.tokens, 11);
        let (grads, d_prefix) = result.grads.unwrap();
        let eps = 1e-2f32;
        for (t, analytic) in grads.tensors().into_iter().enumerate() {
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = model.clone();
                plus.tensors_mut()[t][i] += eps;
                let mut minus = model.clone();
                minus.tensors_mut()[t][i] -= eps;
                let numeric = (mean_loss(&plus, &prefixes, &targets) - mean_loss(&minus, &prefixes, &targets))
                    / (2.0 * f64::from(eps));
                assert!(
                    close(numeric, f64::from(a)),
                    "tensor {t} index {i}: numeric {numeric} analytic {a}"
                );
            }
        }
        for (idx, &analytic) in d_prefix.indexed_iter() {
            let mut plus = prefixes.clone();
            plus[idx] += eps;
            let mut minus = prefixes.clone();
            minus[idx] -= eps;
            let numeric =
                (mean_loss(&model, &plus, &targets) - mean_loss(&model, &minus, &targets)) / (2.0 * f64::from(eps));
            assert!(close(numeric, f64::from(analytic)), "prefix {idx:?}");
        }
    }

    #[test]
    fn padding_does_not_leak_into_other_sequences() {
        let (model, prefixes, targets) = setup();
        let alone = model.run_batch(prefixes.slice(s![1..2, .., ..]), &targets[1..2], false);
        let batched = model.run_batch(prefixes.view(), &targets, false);
        let others: f64 = [0usize, 2]
            .iter()
            .map(|&b| model.run_batch(prefixes.slice(s![b..b + 1, .., ..]), &targets[b..b + 1], false).loss_sum)
            .sum();
        assert!((batched.loss_sum - alone.loss_sum - others).abs() < 1e-4);
    }

    #[test]
    fn flat_round_trip() {
        let (model, _, _) = setup();
        let flat: Vec<f32> = model.tensors().concat();
        assert_eq!(flat.len(), shape().parameter_count());
        assert_eq!(GruDecoder::from_flat(shape(), &flat).unwrap(), model);
        assert!(GruDecoder::from_flat(shape(), &flat[1..]).is_err());
    }

    #[test]
    fn greedy_respects_max_len_and_eos() {
        let mut model = GruDecoder::zeros(shape());
        model.b_out[3] = 1.0;
        let prefix = Array2::zeros((2, 3));
        assert_eq!(model.greedy(&prefix, 6, 4), [3, 3, 3, 3]);
        model.b_out[6] = 2.0;
        assert!(model.greedy(&prefix, 6, 4).is_empty());
    }
}
