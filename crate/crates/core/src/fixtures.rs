//! Seeded generators for toy models, calibration inputs and random module
//! trees. Used by the tests, the benchmarks and the `fixture` CLI command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

use crate::package::{BlobWriter, LayerKind, Manifest, ModelPackage, ModuleNode};
use crate::quant::{affine_params, log2_params, quantize_uniform, QuantConfig, QuantParams};
use crate::tensor::Tensor;

pub const TOY_INPUT_SHAPE: [usize; 3] = [3, 12, 12];
pub const TOY_CLASSES: usize = 10;

/// A model plus calibration and evaluation inputs drawn from one seed.
#[derive(Debug, Clone)]
pub struct ToyFixture {
    pub model: ModelPackage,
    pub calibration: Vec<Tensor>,
    pub eval: Vec<Tensor>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, dims: Vec<usize>, std: f32) -> Tensor {
    let n: usize = dims.iter().product();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_vec(dims, (0..n).map(|_| dist.sample(rng)).collect()).expect("dims match")
}

/// He-style init for a layer with `fan_in` inputs.
fn weight(rng: &mut ChaCha8Rng, dims: Vec<usize>, fan_in: usize) -> Tensor {
    normal_tensor(rng, dims, (2.0 / fan_in as f32).sqrt())
}

fn conv(
    w: &mut BlobWriter,
    rng: &mut ChaCha8Rng,
    name: &str,
    dims: [usize; 4],
    stride: i64,
    padding: i64,
    bias: bool,
) -> ModuleNode {
    let fan_in = dims[1] * dims[2] * dims[3];
    let mut node = ModuleNode::new(name, LayerKind::Conv2d)
        .with_attr("stride", stride)
        .with_attr("padding", padding)
        .with_tensor("weight", w.push_f32(&weight(rng, dims.to_vec(), fan_in)));
    if bias {
        node = node.with_tensor("bias", w.push_f32(&normal_tensor(rng, vec![dims[0]], 0.05)));
    }
    node
}

fn linear(
    w: &mut BlobWriter,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_f: usize,
    in_f: usize,
) -> ModuleNode {
    ModuleNode::new(name, LayerKind::Linear)
        .with_tensor("weight", w.push_f32(&weight(rng, vec![out_f, in_f], in_f)))
        .with_tensor("bias", w.push_f32(&normal_tensor(rng, vec![out_f], 0.05)))
}

fn inputs(rng: &mut ChaCha8Rng, n: usize, dims: &[usize]) -> Vec<Tensor> {
    (0..n)
        .map(|_| normal_tensor(rng, dims.to_vec(), 1.0))
        .collect()
}

/// Small hybrid classifier: two convs, a Linear/Softmax/Linear attention
/// stub and a Linear head. Input `[3, 12, 12]`, 10 logits out.
///
/// Ships 32 calibration and 128 evaluation inputs.
pub fn toy_hybrid(seed: u64) -> ToyFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BlobWriter::new();
    let root = ModuleNode::new("toy", LayerKind::Container)
        .with_child(conv(&mut w, &mut rng, "conv1", [8, 3, 3, 3], 1, 1, true))
        .with_child(ModuleNode::new("act1", LayerKind::ReLU))
        .with_child(conv(&mut w, &mut rng, "conv2", [16, 8, 3, 3], 2, 1, true))
        .with_child(ModuleNode::new("act2", LayerKind::ReLU))
        .with_child(ModuleNode::new("flatten", LayerKind::Flatten))
        .with_child(
            ModuleNode::new("attn", LayerKind::Container)
                .with_child(linear(&mut w, &mut rng, "qkv", 64, 16 * 6 * 6))
                .with_child(ModuleNode::new("sm", LayerKind::Softmax))
                .with_child(linear(&mut w, &mut rng, "proj", 32, 64)),
        )
        .with_child(linear(&mut w, &mut rng, "head", TOY_CLASSES, 32));
    let model = ModelPackage::from_root(root, w.finish()).expect("fixture is valid");
    let calibration = inputs(&mut rng, 32, &TOY_INPUT_SHAPE);
    let eval = inputs(&mut rng, 128, &TOY_INPUT_SHAPE);
    ToyFixture {
        model,
        calibration,
        eval,
    }
}

pub const CONV_HEAVY_INPUT_SHAPE: [usize; 3] = [16, 3, 3];

/// Model whose parameter bytes are almost entirely bias-free conv weights,
/// with a two-logit Linear head. Input `[16, 3, 3]`.
pub fn conv_heavy(seed: u64) -> ToyFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BlobWriter::new();
    let root = ModuleNode::new("net", LayerKind::Container)
        .with_child(conv(&mut w, &mut rng, "conv1", [64, 16, 3, 3], 1, 1, false))
        .with_child(ModuleNode::new("act1", LayerKind::ReLU))
        .with_child(conv(
            &mut w,
            &mut rng,
            "conv2",
            [256, 64, 3, 3],
            1,
            0,
            false,
        ))
        .with_child(ModuleNode::new("act2", LayerKind::ReLU))
        .with_child(ModuleNode::new("flatten", LayerKind::Flatten))
        .with_child(linear(&mut w, &mut rng, "head", 2, 256));
    let model = ModelPackage::from_root(root, w.finish()).expect("fixture is valid");
    let calibration = inputs(&mut rng, 4, &CONV_HEAVY_INPUT_SHAPE);
    let eval = inputs(&mut rng, 4, &CONV_HEAVY_INPUT_SHAPE);
    ToyFixture {
        model,
        calibration,
        eval,
    }
}

/// The hand-traceable hybrid tree: a conv and a `transformer_block` holding
/// a Linear and a Softmax.
pub fn hand_traced(seed: u64) -> ModelPackage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BlobWriter::new();
    let root = ModuleNode::new("m", LayerKind::Container)
        .with_child(conv(&mut w, &mut rng, "conv1", [4, 3, 3, 3], 1, 1, false))
        .with_child(
            ModuleNode::new("transformer_block", LayerKind::Container)
                .with_child(linear(&mut w, &mut rng, "qkv", 8, 4 * 4 * 4))
                .with_child(ModuleNode::new("sm", LayerKind::Softmax)),
        );
    ModelPackage::from_root(root, w.finish()).expect("fixture is valid")
}

const NAME_STEMS: [&str; 14] = [
    "conv",
    "block",
    "stage",
    "mlp",
    "attn",
    "Attention",
    "self_attn",
    "transformer",
    "TransformerLayer",
    "ATTN",
    "norm",
    "proj",
    "head",
    "layer",
];

const KINDS: [&str; 9] = [
    "Conv2d",
    "Linear",
    "ReLU",
    "Softmax",
    "Attention",
    "Flatten",
    "Container",
    "GELU",
    "LayerNorm",
];

/// Random module tree with at most `max_nodes` nodes and depth at most
/// `max_depth` (root at depth 1). No tensors are attached.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize, max_depth: usize) -> ModuleNode {
    let target = rng.gen_range(1..=max_nodes.max(1));
    let mut budget = target - 1;
    let mut root = ModuleNode::new("root", LayerKind::Container);
    grow(rng, &mut root, 1, max_depth, &mut budget);
    root
}

fn grow(
    rng: &mut impl Rng,
    node: &mut ModuleNode,
    depth: usize,
    max_depth: usize,
    budget: &mut usize,
) {
    if depth >= max_depth || *budget == 0 {
        return;
    }
    let n_children = rng.gen_range(0..=(*budget).min(8));
    for i in 0..n_children {
        if *budget == 0 {
            break;
        }
        *budget -= 1;
        let stem = NAME_STEMS.choose(rng).expect("non-empty");
        let kind = *KINDS.choose(rng).expect("non-empty");
        node.children.push(ModuleNode::new(
            format!("{stem}_{i}"),
            LayerKind::from(kind),
        ));
    }
    for child in &mut node.children {
        if rng.gen_bool(0.6) {
            grow(rng, child, depth + 1, max_depth, budget);
        }
    }
}

/// Random valid package: a random tree of at most `max_nodes` nodes whose
/// compute layers carry f32 or quantized weights, with optional biases,
/// softmax activation params and metadata.
pub fn random_package(rng: &mut impl Rng, max_nodes: usize) -> ModelPackage {
    let mut root = random_tree(rng, max_nodes, 6);
    let mut w = BlobWriter::new();
    attach(rng, &mut root, &mut w);
    let mut manifest = Manifest::new(root);
    if rng.gen_bool(0.5) {
        manifest.metadata.insert(
            "source".into(),
            Value::from(format!("gen-{}", rng.gen::<u32>())),
        );
        manifest
            .metadata
            .insert("scale".into(), Value::from(rng.gen::<f64>()));
    }
    ModelPackage::new(manifest, w.finish()).expect("generated package is valid")
}

fn attach(rng: &mut impl Rng, node: &mut ModuleNode, w: &mut BlobWriter) {
    let cfg = QuantConfig::default();
    let wants_weight = match node.kind {
        LayerKind::Conv2d | LayerKind::Linear => true,
        LayerKind::Container => false,
        _ => rng.gen_bool(0.2),
    };
    if wants_weight {
        let rank = rng.gen_range(1..=4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5)).collect();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let t = Tensor::from_vec(dims, data).expect("dims match");
        let rec = if rng.gen_bool(0.3) {
            let (lo, hi) = crate::tensor::min_max(&t).expect("finite");
            let p = affine_params(lo, hi, &cfg).expect("valid range");
            w.push_quant(&quantize_uniform(&t, &p).expect("finite"))
        } else {
            w.push_f32(&t)
        };
        node.tensors.insert("weight".into(), rec);
        if rng.gen_bool(0.5) {
            let b = Tensor::vector((0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .expect("non-empty");
            node.tensors.insert("bias".into(), w.push_f32(&b));
        }
        if rng.gen_bool(0.3) {
            node.attrs.insert("stride".into(), rng.gen_range(1..3));
        }
    }
    if node.kind == LayerKind::Softmax && rng.gen_bool(0.5) {
        let lo = rng.gen_range(0.0f32..0.3);
        let hi = rng.gen_range(lo..=1.0);
        node.quant_act = Some(QuantParams::Log2(
            log2_params(lo, hi, &cfg).expect("valid range"),
        ));
    }
    for c in &mut node.children {
        attach(rng, c, w);
    }
}
