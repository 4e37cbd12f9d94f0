//! Three-layer convolutional segmenter with hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainError, TrainSample};
use crate::imagery::{Frame, LabelMap, VOID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub classes: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Odd kernel size of the first two layers; the last layer is 1×1.
    pub kernel: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.classes == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(TrainError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(TrainError::InvalidConfig(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn layers(&self) -> [Layer; 3] {
        let dims = [
            (3, self.hidden1, self.kernel),
            (self.hidden1, self.hidden2, self.kernel),
            (self.hidden2, self.classes, 1),
        ];
        let mut offset = 0;
        dims.map(|(in_c, out_c, k)| {
            let l = Layer { in_c, out_c, k, offset };
            offset += l.len();
            l
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    in_c: usize,
    out_c: usize,
    k: usize,
    offset: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    fn len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        params[self.offset..self.offset + self.len()].split_at(self.weight_len())
    }

    fn split_mut<'a>(&self, params: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        params[self.offset..self.offset + self.len()].split_at_mut(self.weight_len())
    }
}

/// Per-pixel class scores, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Scores {
    pub fn get(&self, class: usize, x: usize, y: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// Highest-scoring class per pixel; ties go to the lower index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.width * self.height;
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.width, self.height, labels, self.classes).expect("argmax labels are in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinySegModel {
    shape: ModelShape,
    params: Vec<f64>,
}

struct Cache {
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    scores: Vec<f64>,
}

fn same_pad_range(k: usize, ky: usize, extent: usize) -> (isize, usize, usize) {
    let d = ky as isize - (k / 2) as isize;
    let lo = (-d).max(0) as usize;
    let hi = (extent as isize - d.max(0)) as usize;
    (d, lo, hi.max(lo))
}

fn conv_forward(layer: &Layer, params: &[f64], inp: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (wt, bias) = layer.split(params);
    let (k, n) = (layer.k, w * h);
    let mut out = vec![0.0; layer.out_c * n];
    for (oc, o) in out.chunks_exact_mut(n).enumerate() {
        o.fill(bias[oc]);
        for ic in 0..layer.in_c {
            let src = &inp[ic * n..(ic + 1) * n];
            for ky in 0..k {
                let (dy, y0, y1) = same_pad_range(k, ky, h);
                for kx in 0..k {
                    let (dx, x0, x1) = same_pad_range(k, kx, w);
                    let wv = wt[((oc * layer.in_c + ic) * k + ky) * k + kx];
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let s = ((y as isize + dy) as usize) * w;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let srow = &src[(s as isize + x0 as isize + dx) as usize..(s as isize + x1 as isize + dx) as usize];
                        for (a, b) in orow.iter_mut().zip(srow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
fn conv_backward(
    layer: &Layer,
    params: &[f64],
    grads: &mut [f64],
    inp: &[f64],
    dout: &[f64],
    w: usize,
    h: usize,
    want_input: bool,
) -> Option<Vec<f64>> {
    let (wt, _) = layer.split(params);
    let (gw, gb) = layer.split_mut(grads);
    let (k, n) = (layer.k, w * h);
    let mut din = want_input.then(|| vec![0.0; layer.in_c * n]);
    for (oc, d) in dout.chunks_exact(n).enumerate() {
        gb[oc] += d.iter().sum::<f64>();
        for ic in 0..layer.in_c {
            let src = &inp[ic * n..(ic + 1) * n];
            for ky in 0..k {
                let (dy, y0, y1) = same_pad_range(k, ky, h);
                for kx in 0..k {
                    let (dx, x0, x1) = same_pad_range(k, kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let wi = ((oc * layer.in_c + ic) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let s = ((y as isize + dy) * w as isize + x0 as isize + dx) as usize;
                        let drow = &d[y * w + x0..y * w + x1];
                        let srow = &src[s..s + x1 - x0];
                        acc += drow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = din.as_mut() {
                            let wv = wt[wi];
                            let irow = &mut din[ic * n + s..ic * n + s + x1 - x0];
                            for (a, b) in irow.iter_mut().zip(drow) {
                                *a += wv * b;
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    din
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_backward(act: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn encode(frame: &Frame) -> Vec<f64> {
    let n = frame.len();
    let mut x = vec![0.0; 3 * n];
    for (i, px) in frame.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            x[c * n + i] = px[c] as f64 / 255.0 - 0.5;
        }
    }
    x
}

impl TinySegModel {
    /// Seeded uniform initialization with bound `sqrt(6 / fan_in)`; biases zero.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self, TrainError> {
        let mut m = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in shape.layers() {
            let bound = (6.0 / (layer.in_c * layer.k * layer.k) as f64).sqrt();
            let (w, _) = layer.split_mut(&mut m.params);
            for v in w {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(shape: ModelShape) -> Result<Self, TrainError> {
        shape.validate()?;
        let n: usize = shape.layers().iter().map(Layer::len).sum();
        Ok(Self {
            shape,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self, TrainError> {
        let m = Self::zeros(shape)?;
        if params.len() != m.params.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} parameters for a model of {}",
                params.len(),
                m.params.len()
            )));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.shape.classes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter index range of each layer.
    pub fn layer_ranges(&self) -> [std::ops::Range<usize>; 3] {
        self.shape.layers().map(|l| l.offset..l.offset + l.len())
    }

    /// `(weights, biases)` of layer `i` in `0..3`.
    pub fn layer_params(&self, i: usize) -> (&[f64], &[f64]) {
        self.shape.layers()[i].split(&self.params)
    }

    fn run(&self, frame: &Frame) -> Result<Cache, TrainError> {
        let (w, h) = (frame.width(), frame.height());
        let [l1, l2, l3] = self.shape.layers();
        let input = encode(frame);
        let mut a1 = conv_forward(&l1, &self.params, &input, w, h);
        relu(&mut a1);
        let mut a2 = conv_forward(&l2, &self.params, &a1, w, h);
        relu(&mut a2);
        let scores = conv_forward(&l3, &self.params, &a2, w, h);
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite(format!("score {i} of the forward pass")));
        }
        Ok(Cache { input, a1, a2, scores })
    }

    pub fn forward(&self, frame: &Frame) -> Result<Scores, TrainError> {
        Ok(Scores {
            width: frame.width(),
            height: frame.height(),
            classes: self.shape.classes,
            data: self.run(frame)?.scores,
        })
    }

    pub fn predict(&self, frame: &Frame) -> Result<LabelMap, TrainError> {
        Ok(self.forward(frame)?.argmax())
    }

    fn check_sample(&self, labels: &LabelMap) -> Result<usize, TrainError> {
        if labels.num_classes() != self.shape.classes {
            return Err(TrainError::ClassMismatch {
                model: self.shape.classes,
                labels: labels.num_classes(),
            });
        }
        let valid = labels.len() - labels.count_void();
        if valid == 0 {
            return Err(TrainError::AllVoid);
        }
        Ok(valid)
    }

    /// Mean softmax cross-entropy over non-void pixels, and optionally the
    /// score gradient.
    fn cross_entropy(&self, scores: &[f64], labels: &LabelMap, valid: usize, want_grad: bool) -> (f64, Vec<f64>) {
        let (c, n) = (self.shape.classes, labels.len());
        let mut dscores = if want_grad { vec![0.0; c * n] } else { Vec::new() };
        let mut loss = 0.0;
        let inv = 1.0 / valid as f64;
        let mut p = vec![0.0; c];
        for (i, &l) in labels.labels().iter().enumerate() {
            if l == VOID {
                continue;
            }
            let max = (0..c).map(|k| scores[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                p[k] = (scores[k * n + i] - max).exp();
                z += p[k];
            }
            loss += z.ln() - (scores[l as usize * n + i] - max);
            if want_grad {
                for k in 0..c {
                    let t = if k == l as usize { 1.0 } else { 0.0 };
                    dscores[k * n + i] = (p[k] / z - t) * inv;
                }
            }
        }
        (loss * inv, dscores)
    }

    pub fn loss(&self, sample: &TrainSample) -> Result<f64, TrainError> {
        let valid = self.check_sample(sample.labels())?;
        let cache = self.run(sample.frame())?;
        Ok(self.cross_entropy(&cache.scores, sample.labels(), valid, false).0)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, sample: &TrainSample) -> Result<(f64, Vec<f64>), TrainError> {
        let valid = self.check_sample(sample.labels())?;
        let (w, h) = (sample.frame().width(), sample.frame().height());
        let cache = self.run(sample.frame())?;
        let (loss, dscores) = self.cross_entropy(&cache.scores, sample.labels(), valid, true);
        let [l1, l2, l3] = self.shape.layers();
        let mut grad = vec![0.0; self.params.len()];
        let mut d2 = conv_backward(&l3, &self.params, &mut grad, &cache.a2, &dscores, w, h, true).unwrap();
        relu_backward(&cache.a2, &mut d2);
        let mut d1 = conv_backward(&l2, &self.params, &mut grad, &cache.a1, &d2, w, h, true).unwrap();
        relu_backward(&cache.a1, &mut d1);
        conv_backward(&l1, &self.params, &mut grad, &cache.input, &d1, w, h, false);
        Ok((loss, grad))
    }
}
