//! Per-type encoders and the patch projection that turns a 128-wide feature
//! into a node set.

use rand::Rng;

use crate::config::ENCODER_WIDTH;
use crate::error::{GfefError, Result};
use crate::features::{CurveImage, IMAGE_CHANNELS, IMAGE_SIZE, NUM_EXPERT_FEATURES};
use crate::graph::{Graph, Var};
use crate::params::{glorot, Bound, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Kernel sizes of the multi-scale convolution branches.
pub const TS_KERNELS: [usize; 6] = [1, 2, 3, 5, 7, 11];
const TS_BLOCK_WIDTHS: [usize; 2] = [32, ENCODER_WIDTH];
const IMAGE_WIDTHS: [usize; 5] = [IMAGE_CHANNELS, 16, 32, 64, 128];

/// Minimum series length accepted by the series encoder.
pub const MIN_TS_LENGTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputType {
    Ts,
    Img,
    Exp,
}

impl InputType {
    pub const ALL: [InputType; 3] = [InputType::Ts, InputType::Img, InputType::Exp];

    pub fn tag(self) -> &'static str {
        match self {
            InputType::Ts => "ts",
            InputType::Img => "img",
            InputType::Exp => "exp",
        }
    }
}

/// `(kernel, out_channels)` per branch for each block, given series length.
///
/// Kernels longer than the series are dropped and the block width is split
/// evenly over the rest, earlier branches taking the remainder.
pub fn ts_branches(t: usize) -> [Vec<(usize, usize)>; 2] {
    let active: Vec<usize> = TS_KERNELS.iter().copied().filter(|&k| k <= t).collect();
    TS_BLOCK_WIDTHS.map(|width| {
        let n = active.len();
        active
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, width / n + usize::from(i < width % n)))
            .collect()
    })
}

pub fn init_ts_encoder<F: Scalar, R: Rng>(p: &mut ParamSet<F>, rng: &mut R, t: usize) {
    let mut c_in = 1;
    for (bi, branches) in ts_branches(t).iter().enumerate() {
        let mut width = 0;
        for &(k, c) in branches {
            p.insert(format!("ts.b{bi}.k{k}.w"), glorot(rng, k * c_in, c));
            p.insert(format!("ts.b{bi}.k{k}.b"), Tensor::zeros(&[c]));
            width += c;
        }
        p.insert(format!("ts.b{bi}.ln.g"), Tensor::full(&[width], F::one()));
        p.insert(format!("ts.b{bi}.ln.b"), Tensor::zeros(&[width]));
        c_in = width;
    }
}

/// `[B, T, 1]` series to `[B, 128]`.
pub fn ts_encoder<F: Scalar>(g: &mut Graph<F>, b: &Bound, x: Var) -> Var {
    let t = g.shape(x)[1];
    let mut h = x;
    for (bi, branches) in ts_branches(t).iter().enumerate() {
        let outs: Vec<Var> = branches
            .iter()
            .map(|&(k, _)| {
                let left = (k - 1) / 2;
                let cols = g.im2col1d(h, k, left, k - 1 - left);
                g.linear(cols, b.var(&format!("ts.b{bi}.k{k}.w")), b.var(&format!("ts.b{bi}.k{k}.b")))
            })
            .collect();
        let cat = g.concat(&outs, 2);
        h = norm_relu(g, b, cat, &format!("ts.b{bi}.ln"));
    }
    g.mean_axis(h, 1)
}

pub fn init_image_encoder<F: Scalar, R: Rng>(p: &mut ParamSet<F>, rng: &mut R) {
    for l in 0..4 {
        let (ci, co) = (IMAGE_WIDTHS[l], IMAGE_WIDTHS[l + 1]);
        p.insert(format!("img.c{l}.w"), glorot(rng, 9 * ci, co));
        p.insert(format!("img.c{l}.b"), Tensor::zeros(&[co]));
        p.insert(format!("img.c{l}.ln.g"), Tensor::full(&[co], F::one()));
        p.insert(format!("img.c{l}.ln.b"), Tensor::zeros(&[co]));
    }
}

/// `[B, 64, 64, 3]` image to `[B, 128]`.
pub fn image_encoder<F: Scalar>(g: &mut Graph<F>, b: &Bound, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    assert_eq!(&shape[1..], &[IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS]);
    let batch = shape[0];
    let mut h = x;
    let mut side = IMAGE_SIZE;
    for l in 0..4 {
        side /= 2;
        let cols = g.im2col2d(h, 3, 2, 1);
        let y = g.linear(cols, b.var(&format!("img.c{l}.w")), b.var(&format!("img.c{l}.b")));
        let y = norm_relu(g, b, y, &format!("img.c{l}.ln"));
        h = g.reshape(y, &[batch, side, side, IMAGE_WIDTHS[l + 1]]);
    }
    let flat = g.reshape(h, &[batch, side * side, IMAGE_WIDTHS[4]]);
    g.mean_axis(flat, 1)
}

pub fn init_expert_encoder<F: Scalar, R: Rng>(p: &mut ParamSet<F>, rng: &mut R) {
    p.insert("exp.w", glorot(rng, NUM_EXPERT_FEATURES, ENCODER_WIDTH));
    p.insert("exp.b", Tensor::zeros(&[ENCODER_WIDTH]));
}

/// `[B, 12]` standardized features to `[B, 128]`.
pub fn expert_encoder<F: Scalar>(g: &mut Graph<F>, b: &Bound, x: Var) -> Var {
    g.linear(x, b.var("exp.w"), b.var("exp.b"))
}

pub fn init_patch_projection<F: Scalar, R: Rng>(
    p: &mut ParamSet<F>,
    rng: &mut R,
    ty: InputType,
    patch_len: usize,
    hidden: usize,
) {
    p.insert(format!("patch.{}.w", ty.tag()), glorot(rng, patch_len, hidden));
    p.insert(format!("patch.{}.b", ty.tag()), Tensor::zeros(&[hidden]));
}

/// `[B, P * L]` to `[B, P, d]`: node `p` reads elements `[pL, (p+1)L)`.
pub fn patchify_project<F: Scalar>(g: &mut Graph<F>, b: &Bound, feature: Var, ty: InputType, patch_len: usize) -> Var {
    let shape = g.shape(feature).to_vec();
    assert_eq!(shape[1] % patch_len, 0);
    let patches = g.reshape(feature, &[shape[0], shape[1] / patch_len, patch_len]);
    g.linear(
        patches,
        b.var(&format!("patch.{}.w", ty.tag())),
        b.var(&format!("patch.{}.b", ty.tag())),
    )
}

fn norm_relu<F: Scalar>(g: &mut Graph<F>, b: &Bound, x: Var, prefix: &str) -> Var {
    let n = g.layer_norm(
        x,
        b.var(&format!("{prefix}.g")),
        b.var(&format!("{prefix}.b")),
        F::c(LN_EPS),
    );
    g.relu(n)
}

fn frozen_forward<F: Scalar>(
    params: &ParamSet<F>,
    input: Tensor<F>,
    f: impl FnOnce(&mut Graph<F>, &Bound, Var) -> Var,
) -> Vec<F> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(input);
    let out = f(&mut g, &b, x);
    g.value(out).data().to_vec()
}

/// Single-series convenience wrapper around [`ts_encoder`].
pub fn encode_ts<F: Scalar>(series: &[f64], params: &ParamSet<F>) -> Result<Vec<F>> {
    let t = series.len();
    if t < MIN_TS_LENGTH {
        return Err(GfefError::InvalidArgument(format!(
            "series encoder needs at least {MIN_TS_LENGTH} points, got {t}"
        )));
    }
    for (bi, branches) in ts_branches(t).iter().enumerate() {
        for &(k, c) in branches {
            let name = format!("ts.b{bi}.k{k}.w");
            match params.get(&name) {
                Some(w) if w.dim(1) == c => {}
                _ => {
                    return Err(GfefError::Shape(format!(
                        "parameters were built for a different series length ({name})"
                    )))
                }
            }
        }
    }
    let x = Tensor::from_f64(&[1, t, 1], series);
    Ok(frozen_forward(params, x, |g, b, x| ts_encoder(g, b, x)))
}

pub fn encode_image<F: Scalar>(image: &CurveImage, params: &ParamSet<F>) -> Vec<F> {
    let x = Tensor::from_f64(&[1, IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], image.pixels());
    frozen_forward(params, x, |g, b, x| image_encoder(g, b, x))
}

/// Raw pixel-buffer variant of [`encode_image`] that validates the shape.
pub fn encode_image_buffer<F: Scalar>(shape: &[usize], pixels: &[f64], params: &ParamSet<F>) -> Result<Vec<F>> {
    let want = [IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS];
    if shape != want || pixels.len() != want.iter().product::<usize>() {
        return Err(GfefError::Shape(format!("image must be {want:?}, got {shape:?}")));
    }
    let x = Tensor::from_f64(&[1, IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], pixels);
    Ok(frozen_forward(params, x, |g, b, x| image_encoder(g, b, x)))
}

pub fn encode_expert<F: Scalar>(standardized: &[f64; NUM_EXPERT_FEATURES], params: &ParamSet<F>) -> Vec<F> {
    let x = Tensor::from_f64(&[1, NUM_EXPERT_FEATURES], standardized);
    frozen_forward(params, x, |g, b, x| expert_encoder(g, b, x))
}

/// Node set of one input type: `P x d`, row-major.
pub fn project_patches<F: Scalar>(
    feature: &[F],
    params: &ParamSet<F>,
    ty: InputType,
    patch_len: usize,
) -> Result<Tensor<F>> {
    if feature.len() != ENCODER_WIDTH {
        return Err(GfefError::LengthMismatch {
            expected: ENCODER_WIDTH,
            found: feature.len(),
        });
    }
    let x = Tensor::new(vec![1, ENCODER_WIDTH], feature.to_vec());
    let out = frozen_forward(params, x, |g, b, x| patchify_project(g, b, x, ty, patch_len));
    let hidden = out.len() / (ENCODER_WIDTH / patch_len);
    Ok(Tensor::new(vec![ENCODER_WIDTH / patch_len, hidden], out))
}
