//! Per-site multi-layer perceptron denoiser with analytic gradients.
//!
//! Every latent site is processed independently from the feature vector
//! `[z_t channels | image-latent channels | time embedding | text vector]`.
//! Hidden layers use `tanh`; the output layer is linear and emits one value
//! per matte-latent channel. The optional 3×3 first layer sees the
//! zero-padded neighbourhood instead of a single site.
//!
//! ## Weight file
//!
//! ```text
//! magic    b"GMDN"
//! version  u32 = 1
//! latent   u32   cond u32   text u32   first_layer u32 (0 per-site, 1 conv3x3)
//! layers   u32
//! per layer: out u32, in u32
//! per layer: weights (out × in, row-major) then biases, f32
//! ```
//! All integers and floats are little-endian.

use super::{time_embedding, Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor3;

pub const TIME_EMBED_DIM: usize = 8;

const MAGIC: &[u8; 4] = b"GMDN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputLayout {
    pub latent: usize,
    pub cond: usize,
    pub text: usize,
}

impl InputLayout {
    pub fn unconditional(latent: usize) -> Self {
        Self {
            latent,
            cond: 0,
            text: 0,
        }
    }

    pub fn conditional(latent: usize, cond: usize, text: usize) -> Self {
        Self { latent, cond, text }
    }

    pub fn site_width(&self) -> usize {
        self.latent + self.cond + TIME_EMBED_DIM + self.text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstLayer {
    #[default]
    PerSite,
    Conv3x3,
}

impl FirstLayer {
    /// Sites read per output site.
    pub fn taps(self) -> usize {
        match self {
            FirstLayer::PerSite => 1,
            FirstLayer::Conv3x3 => 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    out: usize,
    inp: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    /// `y[s] = W·x[s] + b` for `n` sites. Each output keeps a single running
    /// sum in column order, so inserting zero columns leaves results
    /// bit-identical.
    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.out];
        let mut s = 0;
        while s + 4 <= n {
            let xs = [
                &x[s * self.inp..(s + 1) * self.inp],
                &x[(s + 1) * self.inp..(s + 2) * self.inp],
                &x[(s + 2) * self.inp..(s + 3) * self.inp],
                &x[(s + 3) * self.inp..(s + 4) * self.inp],
            ];
            for o in 0..self.out {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                let mut acc = [self.b[o]; 4];
                for (i, &w) in row.iter().enumerate() {
                    acc[0] += w * xs[0][i];
                    acc[1] += w * xs[1][i];
                    acc[2] += w * xs[2][i];
                    acc[3] += w * xs[3][i];
                }
                for (k, a) in acc.iter().enumerate() {
                    y[(s + k) * self.out + o] = *a;
                }
            }
            s += 4;
        }
        for s in s..n {
            let xs = &x[s * self.inp..(s + 1) * self.inp];
            for o in 0..self.out {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                let mut acc = self.b[o];
                for (w, v) in row.iter().zip(xs) {
                    acc += w * v;
                }
                y[s * self.out + o] = acc;
            }
        }
        y
    }
}

/// Activations recorded by [`MlpDenoiser::forward_tape`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    n: usize,
    /// Input of every layer; index 0 holds the features.
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    layout: InputLayout,
    first_layer: FirstLayer,
    layers: Vec<Dense>,
}

impl MlpDenoiser {
    /// `widths` lists every layer width from input to output.
    pub fn new(layout: InputLayout, widths: &[usize], first_layer: FirstLayer, init_seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("invalid layer widths {widths:?}")));
        }
        let expected_in = layout.site_width() * first_layer.taps();
        if widths[0] != expected_in {
            return Err(Error::config(format!(
                "input width {} does not match layout width {expected_in}",
                widths[0]
            )));
        }
        if *widths.last().unwrap() != layout.latent {
            return Err(Error::config(format!(
                "output width {} does not match {} latent channels",
                widths.last().unwrap(),
                layout.latent
            )));
        }
        let mut rng = SeededRng::new(init_seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let scale = 1.0 / (inp as f64).sqrt();
                Dense {
                    out,
                    inp,
                    w: (0..out * inp).map(|_| rng.normal() * scale).collect(),
                    b: vec![0.0; out],
                }
            })
            .collect();
        Ok(Self {
            layout,
            first_layer,
            layers,
        })
    }

    pub fn layout(&self) -> InputLayout {
        self.layout
    }

    pub fn first_layer(&self) -> FirstLayer {
        self.first_layer
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inp];
        w.extend(self.layers.iter().map(|l| l.out));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameters: per layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(&l.w);
            p.extend_from_slice(&l.b);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} parameters given, model has {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Site-major feature matrix for one input; returns `(features, sites)`.
    pub fn features(&self, input: &DenoiserInput<'_>, schedule: &DiffusionSchedule) -> Result<(Vec<f64>, usize)> {
        input.validate(schedule)?;
        let z = input.z_t;
        if z.channels() != self.layout.latent {
            return Err(Error::shape(format!(
                "model expects {} latent channels, got {}",
                self.layout.latent,
                z.channels()
            )));
        }
        if self.layout.cond > 0 && input.cond.channels() != self.layout.cond {
            return Err(Error::shape(format!(
                "model expects {} condition channels, got {}",
                self.layout.cond,
                input.cond.channels()
            )));
        }
        let zeros_text;
        let text: &[f64] = match (self.layout.text, input.text) {
            (0, _) => &[],
            (d, Some(v)) if v.len() == d => v,
            (d, Some(v)) => {
                return Err(Error::shape(format!(
                    "text vector has {} values, model expects {d}",
                    v.len()
                )))
            }
            (d, None) => {
                zeros_text = vec![0.0; d];
                &zeros_text
            }
        };
        let temb = time_embedding(input.t, schedule.steps());
        let (h, w) = (z.height(), z.width());
        let n = h * w;
        let site_width = self.layout.site_width();
        let width = site_width * self.first_layer.taps();
        let mut feats = vec![0.0; n * width];
        let offsets: &[(isize, isize)] = match self.first_layer {
            FirstLayer::PerSite => &[(0, 0)],
            FirstLayer::Conv3x3 => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 0),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        };
        for y in 0..h {
            for x in 0..w {
                let site = &mut feats[(y * w + x) * width..(y * w + x + 1) * width];
                for (tap, &(dy, dx)) in offsets.iter().enumerate() {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    let block = &mut site[tap * site_width..(tap + 1) * site_width];
                    let mut k = 0;
                    for c in 0..self.layout.latent {
                        block[k] = z.get(c, sy, sx);
                        k += 1;
                    }
                    for c in 0..self.layout.cond {
                        block[k] = input.cond.get(c, sy, sx);
                        k += 1;
                    }
                    block[k..k + TIME_EMBED_DIM].copy_from_slice(&temb);
                    k += TIME_EMBED_DIM;
                    block[k..k + text.len()].copy_from_slice(text);
                }
            }
        }
        Ok((feats, n))
    }

    pub fn forward(&self, features: &[f64], n: usize) -> Vec<f64> {
        self.forward_tape(features, n).output
    }

    pub fn forward_tape(&self, features: &[f64], n: usize) -> MlpTape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = features.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&x, n);
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(x);
            x = y;
        }
        MlpTape { n, inputs, output: x }
    }

    /// Parameter gradient given `dL/d(output)` for a recorded forward pass.
    pub fn backward(&self, tape: &MlpTape, d_output: &[f64]) -> Vec<f64> {
        let n = tape.n;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = d_output.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[li];
            let mut gw = vec![0.0; layer.out * layer.inp];
            let mut gb = vec![0.0; layer.out];
            for s in 0..n {
                let xs = &x[s * layer.inp..(s + 1) * layer.inp];
                for o in 0..layer.out {
                    let d = delta[s * layer.out + o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, v) in gw[o * layer.inp..(o + 1) * layer.inp].iter_mut().zip(xs) {
                        *g += d * v;
                    }
                }
            }
            if li > 0 {
                let mut dx = vec![0.0; n * layer.inp];
                for s in 0..n {
                    let dxs = &mut dx[s * layer.inp..(s + 1) * layer.inp];
                    for o in 0..layer.out {
                        let d = delta[s * layer.out + o];
                        if d == 0.0 {
                            continue;
                        }
                        for (acc, w) in dxs.iter_mut().zip(&layer.w[o * layer.inp..(o + 1) * layer.inp]) {
                            *acc += d * w;
                        }
                    }
                    // x holds tanh outputs of the previous layer
                    for (g, a) in dxs.iter_mut().zip(&x[s * layer.inp..(s + 1) * layer.inp]) {
                        *g *= 1.0 - a * a;
                    }
                }
                delta = dx;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            flat.extend(gw);
            flat.extend(gb);
        }
        flat
    }

    /// Adds zero-initialised input columns for an image latent with `cond`
    /// channels and a `text`-dimensional prompt vector. At initialisation the
    /// extended model reproduces this one exactly for any condition.
    pub fn extend_conditional(&self, cond: usize, text: usize) -> Result<Self> {
        if self.layout.cond != 0 || self.layout.text != 0 {
            return Err(Error::Capability("model already takes conditioning inputs".into()));
        }
        let old = self.layout;
        let layout = InputLayout::conditional(old.latent, cond, text);
        let taps = self.first_layer.taps();
        let (old_site, new_site) = (old.site_width(), layout.site_width());
        let first = &self.layers[0];
        let new_in = new_site * taps;
        let mut w = vec![0.0; first.out * new_in];
        for o in 0..first.out {
            for tap in 0..taps {
                for j in 0..old_site {
                    let nj = if j < old.latent { j } else { j + cond };
                    w[o * new_in + tap * new_site + nj] = first.w[o * first.inp + tap * old_site + j];
                }
            }
        }
        let mut layers = self.layers.clone();
        layers[0] = Dense {
            out: first.out,
            inp: new_in,
            w,
            b: first.b.clone(),
        };
        Ok(Self {
            layout,
            first_layer: self.first_layer,
            layers,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = [
            VERSION,
            self.layout.latent as u32,
            self.layout.cond as u32,
            self.layout.text as u32,
            match self.first_layer {
                FirstLayer::PerSite => 0,
                FirstLayer::Conv3x3 => 1,
            },
            self.layers.len() as u32,
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.layers {
            out.extend_from_slice(&(l.out as u32).to_le_bytes());
            out.extend_from_slice(&(l.inp as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.w.iter().chain(&l.b) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Validation("not a denoiser weight file".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Validation(format!("unsupported weight file version {version}")));
        }
        let layout = InputLayout::conditional(cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        let first_layer = match cur.u32()? {
            0 => FirstLayer::PerSite,
            1 => FirstLayer::Conv3x3,
            k => return Err(Error::Validation(format!("unknown first-layer kind {k}"))),
        };
        let count = cur.u32()? as usize;
        if count == 0 || count > 64 {
            return Err(Error::Validation(format!("implausible layer count {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            shapes.push((cur.u32()? as usize, cur.u32()? as usize));
        }
        let mut widths = vec![shapes[0].1];
        for (i, &(out, inp)) in shapes.iter().enumerate() {
            if inp != widths[i] {
                return Err(Error::Validation("layer shapes do not chain".into()));
            }
            widths.push(out);
        }
        let mut model =
            MlpDenoiser::new(layout, &widths, first_layer, 0).map_err(|e| Error::Validation(e.to_string()))?;
        let mut params = Vec::with_capacity(model.num_params());
        for _ in 0..model.num_params() {
            params.push(cur.f32()? as f64);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Validation("trailing bytes after weights".into()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite weight".into()));
        }
        model.set_params(&params)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Validation("weight file truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Denoiser for MlpDenoiser {
    fn predict_eps(&self, input: &DenoiserInput<'_>, schedule: &DiffusionSchedule) -> Result<Tensor3> {
        let (feats, n) = self.features(input, schedule)?;
        let out = self.forward(&feats, n);
        let dims = input.z_t.dims();
        let latent = self.layout.latent;
        let w = dims.width;
        Ok(Tensor3::from_fn(dims, |c, y, x| out[(y * w + x) * latent + c]))
    }

    fn as_mlp(&self) -> Option<&MlpDenoiser> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn model(layout: InputLayout, first: FirstLayer, seed: u64) -> MlpDenoiser {
        let w = layout.site_width() * first.taps();
        MlpDenoiser::new(layout, &[w, 16, 12, layout.latent], first, seed).unwrap()
    }

    fn run(m: &MlpDenoiser, z: &Tensor3, cond: &Tensor3, text: Option<&[f64]>) -> Tensor3 {
        let s = DiffusionSchedule::default();
        m.predict_eps(
            &DenoiserInput {
                z_t: z,
                cond,
                t: 321,
                text,
            },
            &s,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = model(InputLayout::conditional(4, 12, 8), FirstLayer::PerSite, 1);
        m.set_params(&vec![0.0; m.num_params()]).unwrap();
        let mut rng = SeededRng::new(3);
        let z = rng.randn(Dims::new(4, 3, 3)).unwrap();
        let c = rng.randn(Dims::new(12, 3, 3)).unwrap();
        assert!(run(&m, &z, &c, None).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn same_seed_same_output() {
        let layout = InputLayout::conditional(4, 12, 0);
        let mut rng = SeededRng::new(3);
        let z = rng.randn(Dims::new(4, 3, 3)).unwrap();
        let c = rng.randn(Dims::new(12, 3, 3)).unwrap();
        let a = run(&model(layout, FirstLayer::PerSite, 9), &z, &c, None);
        let b = run(&model(layout, FirstLayer::PerSite, 9), &z, &c, None);
        assert_eq!(a, b);
        let other = run(&model(layout, FirstLayer::PerSite, 10), &z, &c, None);
        assert_ne!(a, other);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let layout = InputLayout::conditional(4, 12, 0);
        assert!(matches!(
            MlpDenoiser::new(layout, &[10, 8, 4], FirstLayer::PerSite, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            MlpDenoiser::new(layout, &[24, 8, 5], FirstLayer::PerSite, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn extension_is_exact_at_init() {
        for first in [FirstLayer::PerSite, FirstLayer::Conv3x3] {
            let base = model(InputLayout::unconditional(4), first, 5);
            let ext = base.extend_conditional(12, 8).unwrap();
            let mut rng = SeededRng::new(1);
            let z = rng.randn(Dims::new(4, 4, 5)).unwrap();
            let none = Tensor3::zeros(Dims::new(1, 4, 5));
            let reference = run(&base, &z, &none, None);
            for _ in 0..5 {
                let c = rng.randn(Dims::new(12, 4, 5)).unwrap();
                let txt: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
                let out = run(&ext, &z, &c, Some(&txt));
                let same = out
                    .data()
                    .iter()
                    .zip(reference.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0));
                assert!(same);
            }
        }
    }

    #[test]
    fn extending_twice_is_refused() {
        let ext = model(InputLayout::unconditional(4), FirstLayer::PerSite, 5)
            .extend_conditional(12, 0)
            .unwrap();
        assert!(matches!(ext.extend_conditional(1, 1), Err(Error::Capability(_))));
    }

    #[test]
    fn per_site_model_is_local() {
        let m = model(InputLayout::conditional(4, 12, 0), FirstLayer::PerSite, 2);
        let mut rng = SeededRng::new(6);
        let z = rng.randn(Dims::new(4, 4, 4)).unwrap();
        let c = rng.randn(Dims::new(12, 4, 4)).unwrap();
        let full = run(&m, &z, &c, None);
        let b = crate::tensor::PatchBox::new(1, 1, 2, 3).unwrap();
        let part = run(&m, &z.crop(&b).unwrap(), &c.crop(&b).unwrap(), None);
        assert!(part.max_abs_diff(&full.crop(&b).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn conv_model_is_not_local() {
        let m = model(InputLayout::conditional(4, 12, 0), FirstLayer::Conv3x3, 2);
        let mut rng = SeededRng::new(6);
        let z = rng.randn(Dims::new(4, 4, 4)).unwrap();
        let c = rng.randn(Dims::new(12, 4, 4)).unwrap();
        let full = run(&m, &z, &c, None);
        let b = crate::tensor::PatchBox::new(1, 1, 2, 3).unwrap();
        let part = run(&m, &z.crop(&b).unwrap(), &c.crop(&b).unwrap(), None);
        assert!(part.max_abs_diff(&full.crop(&b).unwrap()).unwrap() > 1e-6);
    }

    #[test]
    fn weight_file_round_trip() {
        let m = model(InputLayout::conditional(4, 12, 8), FirstLayer::Conv3x3, 4);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"GMDN");
        let back = MlpDenoiser::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.widths(), m.widths());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
        }
        assert!(MlpDenoiser::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(MlpDenoiser::from_bytes(b"NOPE").is_err());
    }
}
