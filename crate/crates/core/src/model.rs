//! The hybrid network: one weight-sharing Siamese branch, one branch per
//! modality with its own weights, and a per-modality merge layer that maps
//! the concatenated branch outputs to the hybrid encodings x̂ and ŷ.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal};
use crate::scalar::Scalar;
use crate::tape::{pool_extent, sigmoid, Tape, Var};
use crate::tensor::Tensor;
use crate::{DESCRIPTOR_DIM, PATCH_PIXELS, PATCH_SIZE};

/// Guard against division by zero when normalising descriptors.
pub const NORM_EPS: f64 = 1e-8;

/// Samples per inference forward pass when encoding large sets.
pub const ENCODE_CHUNK: usize = 64;

/// Loss family the network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Unit-norm descriptors trained with a hinge on their L2 distance.
    L2Hinge,
    /// Unnormalised encodings classified by a two-way softmax head.
    Softmax,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::L2Hinge => "l2",
            Variant::Softmax => "softmax",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::L2Hinge => 0,
            Variant::Softmax => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::L2Hinge),
            1 => Some(Variant::Softmax),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l2" | "l2hinge" | "L2Hinge" => Some(Variant::L2Hinge),
            "softmax" | "Softmax" => Some(Variant::Softmax),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Variant::L2Hinge => Variant::Softmax,
            Variant::Softmax => Variant::L2Hinge,
        }
    }
}

/// Sensor a patch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    X,
    Y,
}

/// Which encoding a score is computed from.
///
/// `Hybrid` is the full model; the other two read out a single branch, as
/// the single-branch ablation arms do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Readout {
    #[default]
    Hybrid,
    Siamese,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// 3x3 stride-2 ceil-mode max pooling after the activation.
    pub pool_after: bool,
}

/// Layer stack of one branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchArch {
    pub convs: Vec<ConvSpec>,
    /// Flattened width entering the final FC layer.
    pub fc_in: usize,
    pub unit_norm: bool,
}

const POOL_K: usize = 3;
const POOL_STRIDE: usize = 2;

/// (output channels, kernel, pad, pool after) per conv row.
const L2_ROWS: [(usize, usize, usize, bool); 5] =
    [(32, 5, 2, true), (64, 5, 2, true), (128, 3, 1, true), (256, 3, 0, false), (256, 3, 0, false)];
const SOFTMAX_EXTRA_ROW: (usize, usize, usize, bool) = (256, 3, 0, false);

fn rows(variant: Variant) -> Vec<(usize, usize, usize, bool)> {
    let mut r = L2_ROWS.to_vec();
    if variant == Variant::Softmax {
        r.push(SOFTMAX_EXTRA_ROW);
    }
    r
}

impl BranchArch {
    /// The published layer stack for `variant`.
    pub fn for_variant(variant: Variant) -> Self {
        Self::scaled(variant, 1).expect("divisor 1 is valid")
    }

    /// The published stack with every conv width divided by `divisor`
    /// (at least one channel). Kernels, strides, pads, pooling and the
    /// 128-wide output are unchanged.
    pub fn scaled(variant: Variant, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::invalid("width divisor", "must be at least 1"));
        }
        let widths: Vec<usize> = rows(variant).iter().map(|r| (r.0 / divisor).max(1)).collect();
        Self::from_widths(variant, &widths)
    }

    /// The published stack with explicit conv widths.
    pub fn from_widths(variant: Variant, widths: &[usize]) -> Result<Self> {
        let rows = rows(variant);
        if widths.len() != rows.len() || widths.contains(&0) {
            return Err(Error::invalid(
                "conv widths",
                format!("{} {} widths expected, got {widths:?}", rows.len(), variant.name()),
            ));
        }
        let mut convs = Vec::with_capacity(rows.len());
        let mut cin = 1;
        let mut size = PATCH_SIZE;
        for (&(_, kernel, pad, pool_after), &cout) in rows.iter().zip(widths) {
            convs.push(ConvSpec { in_channels: cin, out_channels: cout, kernel, stride: 1, pad, pool_after });
            size = size + 2 * pad - kernel + 1;
            if pool_after {
                size = pool_extent(size, POOL_K, POOL_STRIDE, true);
            }
            cin = cout;
        }
        Ok(BranchArch { convs, fc_in: cin * size * size, unit_norm: variant == Variant::L2Hinge })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.out_channels).collect()
    }

    /// Reconstructs the stack from the weight shapes of a branch, or `None`
    /// if they do not describe the stack of `variant`.
    pub fn infer(variant: Variant, shapes: &[Vec<usize>]) -> Option<Self> {
        let n = rows(variant).len();
        if shapes.len() != 2 * n + 2 {
            return None;
        }
        let widths: Vec<usize> = (0..n).map(|i| shapes[2 * i].first().copied()).collect::<Option<_>>()?;
        let arch = Self::from_widths(variant, &widths).ok()?;
        (arch.param_shapes() == shapes).then_some(arch)
    }

    /// Shapes of the branch tensors: conv weight and bias per row, then FC.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]);
            out.push(vec![c.out_channels]);
        }
        out.push(vec![DESCRIPTOR_DIM, self.fc_in]);
        out.push(vec![DESCRIPTOR_DIM]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Output shape of one layer of a branch, as `(label, [C, H, W])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub label: String,
    pub dims: Vec<usize>,
}

/// Weight and bias of a fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        LinearParams { weight: Tensor::parameter(&[outputs, inputs]), bias: Tensor::parameter(&[outputs]) }
    }

    /// `W·v + b` on a plain slice.
    pub fn apply(&self, v: &[S]) -> Vec<S> {
        let (k, d) = (self.weight.shape()[0], self.weight.shape()[1]);
        let w = self.weight.data();
        (0..k).map(|r| w[r * d..(r + 1) * d].iter().zip(v).map(|(&a, &b)| a * b).sum::<S>() + self.bias.data()[r]).collect()
    }
}

/// Parameters of one branch in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<S> {
    pub convs: Vec<LinearParams<S>>,
    pub fc: LinearParams<S>,
}

impl<S: Scalar> BranchParams<S> {
    pub fn zeros(arch: &BranchArch) -> Self {
        let convs = arch
            .convs
            .iter()
            .map(|c| LinearParams {
                weight: Tensor::parameter(&[c.out_channels, c.in_channels, c.kernel, c.kernel]),
                bias: Tensor::parameter(&[c.out_channels]),
            })
            .collect();
        BranchParams { convs, fc: LinearParams::zeros(arch.fc_in, DESCRIPTOR_DIM) }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.convs.iter().chain(core::iter::once(&self.fc)).flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.convs.iter_mut().chain(core::iter::once(&mut self.fc)).flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Classifier heads of the softmax variant, each `128 → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHeads<S> {
    /// Applied to x̂ + ŷ.
    pub main: LinearParams<S>,
    /// Applied to the sum of the Siamese branch outputs.
    pub siam: LinearParams<S>,
    /// Applied to the sum of the modality branch outputs.
    pub asym: LinearParams<S>,
}

/// Parameter groups in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Siamese,
    AsymX,
    AsymY,
    MergeX,
    MergeY,
    HeadMain,
    HeadSiam,
    HeadAsym,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Siamese,
        Group::AsymX,
        Group::AsymY,
        Group::MergeX,
        Group::MergeY,
        Group::HeadMain,
        Group::HeadSiam,
        Group::HeadAsym,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Siamese => "siamese",
            Group::AsymX => "asym_x",
            Group::AsymY => "asym_y",
            Group::MergeX => "merge_x",
            Group::MergeY => "merge_y",
            Group::HeadMain => "head_main",
            Group::HeadSiam => "head_siam",
            Group::HeadAsym => "head_asym",
        }
    }
}

/// Which parts of the network a forward pass needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paths {
    pub siamese: bool,
    pub asym: bool,
    /// Merge layers (requires both branches).
    pub hybrid: bool,
    pub head_main: bool,
    pub head_siam: bool,
    pub head_asym: bool,
}

impl Paths {
    pub const ALL: Paths = Paths { siamese: true, asym: true, hybrid: true, head_main: true, head_siam: true, head_asym: true };

    pub fn for_readout(readout: Readout) -> Self {
        match readout {
            Readout::Hybrid => Paths::ALL,
            Readout::Siamese => {
                Paths { siamese: true, asym: false, hybrid: false, head_main: false, head_siam: true, head_asym: false }
            }
            Readout::Asymmetric => {
                Paths { siamese: false, asym: true, hybrid: false, head_main: false, head_siam: false, head_asym: true }
            }
        }
    }

    fn includes(&self, g: Group) -> bool {
        match g {
            Group::Siamese => self.siamese || self.hybrid,
            Group::AsymX | Group::AsymY => self.asym || self.hybrid,
            Group::MergeX | Group::MergeY => self.hybrid,
            Group::HeadMain => self.head_main,
            Group::HeadSiam => self.head_siam,
            Group::HeadAsym => self.head_asym,
        }
    }
}

/// The complete hybrid network.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridNetwork<S> {
    variant: Variant,
    arch: BranchArch,
    /// Shared by both modality paths.
    pub siamese: BranchParams<S>,
    pub asym_x: BranchParams<S>,
    pub asym_y: BranchParams<S>,
    /// `256 → 128` merge producing x̂.
    pub merge_x: LinearParams<S>,
    /// `256 → 128` merge producing ŷ.
    pub merge_y: LinearParams<S>,
    pub heads: Option<SoftmaxHeads<S>>,
}

/// Leaves of a network recorded on a tape, aligned with
/// [`HybridNetwork::tensors`]. Groups outside the requested paths are `None`.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Option<Var>>,
    ranges: Vec<(Group, usize, usize)>,
}

impl BoundParams {
    fn group(&self, g: Group) -> Option<&[Option<Var>]> {
        self.ranges.iter().find(|r| r.0 == g).map(|&(_, a, b)| &self.vars[a..b]).filter(|s| s.iter().all(Option::is_some))
    }

    pub(crate) fn linear(&self, g: Group) -> Result<(Var, Var)> {
        let s = self.group(g).ok_or_else(|| Error::Tape(format!("parameter group {} is not bound", g.name())))?;
        Ok((s[0].unwrap(), s[1].unwrap()))
    }

    pub fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

/// Encodings of one batch recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub modality: Modality,
    pub siam: Option<Var>,
    pub asym: Option<Var>,
    pub hybrid: Option<Var>,
}

/// Encodings of a batch as plain row-major `[N,128]` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Encodings<S> {
    pub modality: Modality,
    pub n: usize,
    pub siam: Vec<S>,
    pub asym: Vec<S>,
    pub hybrid: Vec<S>,
}

impl<S: Scalar> Encodings<S> {
    fn empty(modality: Modality) -> Self {
        Encodings { modality, n: 0, siam: Vec::new(), asym: Vec::new(), hybrid: Vec::new() }
    }

    pub fn row(&self, readout: Readout, i: usize) -> &[S] {
        let m = match readout {
            Readout::Hybrid => &self.hybrid,
            Readout::Siamese => &self.siam,
            Readout::Asymmetric => &self.asym,
        };
        &m[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM]
    }

    pub fn matrix(&self, readout: Readout) -> &[S] {
        match readout {
            Readout::Hybrid => &self.hybrid,
            Readout::Siamese => &self.siam,
            Readout::Asymmetric => &self.asym,
        }
    }
}

impl<S: Scalar> HybridNetwork<S> {
    /// A zero-initialised network with the published layer stack.
    pub fn new(variant: Variant) -> Self {
        Self::with_arch(variant, BranchArch::for_variant(variant))
    }

    pub fn with_arch(variant: Variant, arch: BranchArch) -> Self {
        let branch = BranchParams::zeros(&arch);
        let heads = (variant == Variant::Softmax).then(|| SoftmaxHeads {
            main: LinearParams::zeros(DESCRIPTOR_DIM, 2),
            siam: LinearParams::zeros(DESCRIPTOR_DIM, 2),
            asym: LinearParams::zeros(DESCRIPTOR_DIM, 2),
        });
        HybridNetwork {
            variant,
            siamese: branch.clone(),
            asym_x: branch.clone(),
            asym_y: branch,
            merge_x: LinearParams::zeros(2 * DESCRIPTOR_DIM, DESCRIPTOR_DIM),
            merge_y: LinearParams::zeros(2 * DESCRIPTOR_DIM, DESCRIPTOR_DIM),
            heads,
            arch,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arch(&self) -> &BranchArch {
        &self.arch
    }

    /// Group of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(Group, usize)> {
        let per_branch = 2 * (self.arch.convs.len() + 1);
        let mut out = vec![
            (Group::Siamese, per_branch),
            (Group::AsymX, per_branch),
            (Group::AsymY, per_branch),
            (Group::MergeX, 2),
            (Group::MergeY, 2),
        ];
        if self.heads.is_some() {
            out.extend([(Group::HeadMain, 2), (Group::HeadSiam, 2), (Group::HeadAsym, 2)]);
        }
        out
    }

    /// Expected tensor shapes, in storage order.
    pub fn expected_shapes(variant: Variant, arch: &BranchArch) -> Vec<Vec<usize>> {
        let branch = arch.param_shapes();
        let mut out = Vec::new();
        for _ in 0..3 {
            out.extend(branch.iter().cloned());
        }
        for _ in 0..2 {
            out.push(vec![DESCRIPTOR_DIM, 2 * DESCRIPTOR_DIM]);
            out.push(vec![DESCRIPTOR_DIM]);
        }
        if variant == Variant::Softmax {
            for _ in 0..3 {
                out.push(vec![2, DESCRIPTOR_DIM]);
                out.push(vec![2]);
            }
        }
        out
    }

    /// Every parameter tensor in storage order.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = Vec::new();
        out.extend(self.siamese.tensors());
        out.extend(self.asym_x.tensors());
        out.extend(self.asym_y.tensors());
        for l in [&self.merge_x, &self.merge_y] {
            out.extend([&l.weight, &l.bias]);
        }
        if let Some(h) = &self.heads {
            for l in [&h.main, &h.siam, &h.asym] {
                out.extend([&l.weight, &l.bias]);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        out.extend(self.siamese.tensors_mut());
        out.extend(self.asym_x.tensors_mut());
        out.extend(self.asym_y.tensors_mut());
        for l in [&mut self.merge_x, &mut self.merge_y] {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        if let Some(h) = &mut self.heads {
            for l in [&mut h.main, &mut h.siam, &mut h.asym] {
                out.extend([&mut l.weight, &mut l.bias]);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds a network from tensors in storage order.
    pub fn from_tensors(variant: Variant, arch: BranchArch, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let expected = Self::expected_shapes(variant, &arch);
        let got: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        if expected != got {
            return Err(Error::shape("from_tensors", "tensor shapes do not match the layer stack"));
        }
        let mut net = Self::with_arch(variant, arch);
        for (dst, src) in net.tensors_mut().into_iter().zip(tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(net)
    }

    /// Converts every parameter to another precision.
    pub fn cast<T: Scalar>(&self) -> HybridNetwork<T> {
        let mut out = HybridNetwork::<T>::with_arch(self.variant, self.arch.clone());
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::from_f64_lossy(s.as_f64());
            }
        }
        out
    }

    /// Draws every weight i.i.d. from N(0, sigma²) and zeroes every bias.
    /// Both modality branches, and both merge layers, receive the same
    /// initial weights.
    pub fn init_params(&mut self, seed: u64, sigma: f64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("{sigma} must be positive")));
        }
        self.init_with(seed, |_| sigma);
        Ok(())
    }

    /// Like [`init_params`](Self::init_params) with a per-layer deviation
    /// `gain · sqrt(2 / fan_in)`.
    pub fn init_fan_in(&mut self, seed: u64, gain: f64) -> Result<()> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::invalid("gain", format!("{gain} must be positive")));
        }
        self.init_with(seed, |shape| {
            let fan_in: usize = shape[1..].iter().product();
            gain * libm::sqrt(2.0 / fan_in as f64)
        });
        Ok(())
    }

    fn init_with(&mut self, seed: u64, sigma_of: impl Fn(&[usize]) -> f64) {
        let mut rng = seeded(seed);
        let layout = self.layout();
        let mut groups = Vec::new();
        for (g, n) in &layout {
            groups.extend(core::iter::repeat_n(*g, *n));
        }
        for (t, g) in self.tensors_mut().into_iter().zip(groups) {
            if g == Group::AsymY || g == Group::MergeY {
                continue;
            }
            if t.shape().len() == 1 {
                t.data_mut().fill(S::zero());
            } else {
                let sigma = sigma_of(t.shape());
                for v in t.data_mut() {
                    *v = S::from_f64_lossy(sigma * standard_normal(&mut rng));
                }
            }
        }
        self.asym_y = self.asym_x.clone();
        self.merge_y = self.merge_x.clone();
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Records the parameters needed by `paths` as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>, paths: Paths) -> BoundParams {
        let mut vars = Vec::new();
        let mut ranges = Vec::new();
        let tensors = self.tensors();
        let mut at = 0;
        for (g, n) in self.layout() {
            let on = paths.includes(g);
            for t in &tensors[at..at + n] {
                vars.push(on.then(|| tape.leaf(t)));
            }
            ranges.push((g, at, at + n));
            at += n;
        }
        BoundParams { vars, ranges }
    }

    /// Adds the tape's leaf gradients into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, bound: &BoundParams) -> Result<()> {
        for (t, v) in self.tensors_mut().into_iter().zip(&bound.vars) {
            if let Some(g) = v.and_then(|v| tape.grad(v)) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn branch_forward(
        &self,
        tape: &mut Tape<S>,
        vars: &[Option<Var>],
        input: Var,
        mut trace: Option<&mut Vec<LayerShape>>,
    ) -> Result<Var> {
        let mut h = input;
        let v = |i: usize| vars[i].ok_or_else(|| Error::Tape("branch not bound".into()));
        for (i, spec) in self.arch.convs.iter().enumerate() {
            h = tape.conv2d(h, v(2 * i)?, v(2 * i + 1)?, spec.stride, spec.pad)?;
            h = tape.relu(h);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(LayerShape { label: format!("Conv{i}"), dims: tape.shape(h)[1..].to_vec() });
            }
            if spec.pool_after {
                h = tape.maxpool2d(h, POOL_K, POOL_STRIDE, true)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(LayerShape { label: "Pooling".into(), dims: tape.shape(h)[1..].to_vec() });
                }
            }
        }
        let k = self.arch.convs.len();
        h = tape.flatten(h)?;
        h = tape.linear(h, v(2 * k)?, v(2 * k + 1)?)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(LayerShape { label: "FC".into(), dims: tape.shape(h)[1..].to_vec() });
        }
        if self.arch.unit_norm {
            h = tape.unit_normalize(h, S::from_f64_lossy(NORM_EPS))?;
            if let Some(tr) = trace {
                tr.push(LayerShape { label: "Unit norm".into(), dims: tape.shape(h)[1..].to_vec() });
            }
        }
        Ok(h)
    }

    fn check_input(tape: &Tape<S>, input: Var) -> Result<()> {
        let s = tape.shape(input);
        if s.len() != 4 || s[1] != 1 || s[2] != PATCH_SIZE || s[3] != PATCH_SIZE {
            return Err(Error::shape("encode", format!("expected [N,1,{PATCH_SIZE},{PATCH_SIZE}] patches, got {s:?}")));
        }
        Ok(())
    }

    /// Encodes a `[N,1,64,64]` batch of one modality on `tape`.
    pub fn encode_on(&self, tape: &mut Tape<S>, bound: &BoundParams, input: Var, modality: Modality) -> Result<EncodedVars> {
        Self::check_input(tape, input)?;
        let asym_group = match modality {
            Modality::X => Group::AsymX,
            Modality::Y => Group::AsymY,
        };
        let siam = match bound.group(Group::Siamese) {
            Some(vars) => Some(self.branch_forward(tape, vars, input, None)?),
            None => None,
        };
        let asym = match bound.group(asym_group) {
            Some(vars) => Some(self.branch_forward(tape, vars, input, None)?),
            None => None,
        };
        let merge_group = match modality {
            Modality::X => Group::MergeX,
            Modality::Y => Group::MergeY,
        };
        let hybrid = match (siam, asym, bound.group(merge_group)) {
            (Some(s), Some(a), Some(_)) => {
                let (w, b) = bound.linear(merge_group)?;
                let h = tape.concat(s, a)?;
                let mut out = tape.linear(h, w, b)?;
                if self.arch.unit_norm {
                    out = tape.unit_normalize(out, S::from_f64_lossy(NORM_EPS))?;
                }
                Some(out)
            }
            _ => None,
        };
        Ok(EncodedVars { modality, siam, asym, hybrid })
    }

    /// Layer-by-layer output shapes (`[C,H,W]` or `[D]`) of one branch for a
    /// single patch.
    pub fn trace_branch(&self) -> Result<Vec<LayerShape>> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape, Paths::for_readout(Readout::Siamese));
        let input = tape.constant(&[1, 1, PATCH_SIZE, PATCH_SIZE], vec![S::zero(); PATCH_PIXELS])?;
        let mut trace = Vec::new();
        let vars = bound.group(Group::Siamese).unwrap().to_vec();
        self.branch_forward(&mut tape, &vars, input, Some(&mut trace))?;
        Ok(trace)
    }

    /// Encodes normalised patches (`N · 64 · 64` values) without recording
    /// gradients, in chunks of [`ENCODE_CHUNK`].
    pub fn encode(&self, patches: &[S], modality: Modality, paths: Paths) -> Result<Encodings<S>> {
        if patches.len() % PATCH_PIXELS != 0 {
            return Err(Error::shape(
                "encode",
                format!("{} values is not a whole number of {PATCH_SIZE}x{PATCH_SIZE} patches", patches.len()),
            ));
        }
        let mut out = Encodings::empty(modality);
        for chunk in patches.chunks(ENCODE_CHUNK * PATCH_PIXELS) {
            let n = chunk.len() / PATCH_PIXELS;
            let mut tape = Tape::inference();
            let bound = self.bind(&mut tape, paths);
            let input = tape.constant(&[n, 1, PATCH_SIZE, PATCH_SIZE], chunk.to_vec())?;
            let enc = self.encode_on(&mut tape, &bound, input, modality)?;
            let zeros = vec![S::zero(); n * DESCRIPTOR_DIM];
            out.siam.extend_from_slice(enc.siam.map_or(&zeros[..], |v| tape.value(v)));
            out.asym.extend_from_slice(enc.asym.map_or(&zeros[..], |v| tape.value(v)));
            out.hybrid.extend_from_slice(enc.hybrid.map_or(&zeros[..], |v| tape.value(v)));
            out.n += n;
        }
        Ok(out)
    }

    /// Softmax head for a readout.
    pub fn head(&self, readout: Readout) -> Result<&LinearParams<S>> {
        let heads = self
            .heads
            .as_ref()
            .ok_or(Error::VariantMismatch { expected: Variant::Softmax.name(), found: self.variant.name() })?;
        Ok(match readout {
            Readout::Hybrid => &heads.main,
            Readout::Siamese => &heads.siam,
            Readout::Asymmetric => &heads.asym,
        })
    }

    /// Two match logits `[nonmatch, match]` from the head applied to `ex + ey`.
    pub fn match_logits(&self, readout: Readout, ex: &[S], ey: &[S]) -> Result<[S; 2]> {
        let head = self.head(readout)?;
        let sum: Vec<S> = ex.iter().zip(ey).map(|(&a, &b)| a + b).collect();
        let l = head.apply(&sum);
        Ok([l[0], l[1]])
    }

    /// Distance between descriptors for the L2 variant; match probability
    /// for the softmax variant.
    pub fn score_pair(&self, ex: &[S], ey: &[S]) -> Result<S> {
        self.score_pair_with(Readout::Hybrid, ex, ey)
    }

    pub fn score_pair_with(&self, readout: Readout, ex: &[S], ey: &[S]) -> Result<S> {
        if ex.len() != ey.len() {
            return Err(Error::DimensionMismatch { what: "score_pair", left: vec![ex.len()], right: vec![ey.len()] });
        }
        match self.variant {
            Variant::L2Hinge => {
                if self.heads.is_some() {
                    return Err(Error::VariantMismatch {
                        expected: Variant::L2Hinge.name(),
                        found: "l2 network carrying softmax heads",
                    });
                }
                Ok(l2_distance(ex, ey))
            }
            Variant::Softmax => {
                let [l0, l1] = self.match_logits(readout, ex, ey)?;
                Ok(sigmoid(l1 - l0))
            }
        }
    }

    /// Score oriented so that higher means "more likely a match": negated
    /// distance for L2, logit margin for softmax (monotone in the match
    /// probability, without its saturation ties).
    pub fn oriented_score(&self, readout: Readout, ex: &[S], ey: &[S]) -> Result<f64> {
        match self.variant {
            Variant::L2Hinge => Ok(-l2_distance(ex, ey).as_f64()),
            Variant::Softmax => {
                let [l0, l1] = self.match_logits(readout, ex, ey)?;
                Ok((l1 - l0).as_f64())
            }
        }
    }
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().sqrt()
}
