//! DenseNet and bottleneck-ResNet assemblies.

use super::layers::{
    add_into_channels, concat_channels, join, slice_channels, AvgPool3d, BatchNorm3d, Conv3d, GlobalAvgPool, Layer,
    Linear, MaxPool3d, Mode, Relu, Sequential, StateVisitor, Window,
};
use super::{Family, ModelConfig};
use crate::tensor::Tensor;

pub const BN_SIZE: usize = 4;
pub const EXPANSION: usize = 4;

/// norm -> relu -> 1x1 conv -> norm -> relu -> 3x3x3 conv, emitting
/// `growth` new channels.
#[derive(Clone)]
struct DenseLayer {
    layers: Sequential,
}

impl DenseLayer {
    fn new(cin: usize, growth: usize, seed: u64, name: &str) -> Self {
        let mid = BN_SIZE * growth;
        let mut layers = Sequential::new();
        layers.push("norm1", BatchNorm3d::new(cin));
        layers.push("relu1", Relu::default());
        layers.push("conv1", Conv3d::new(cin, mid, Window::cube(1, 1, 0), false, seed, &join(name, "layers.conv1")));
        layers.push("norm2", BatchNorm3d::new(mid));
        layers.push("relu2", Relu::default());
        layers.push("conv2", Conv3d::new(mid, growth, Window::cube(3, 1, 1), false, seed, &join(name, "layers.conv2")));
        Self { layers }
    }
}

/// Each layer sees the concatenation of the block input and all earlier
/// layer outputs; the block emits the full concatenation.
#[derive(Clone)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
    cin: usize,
    growth: usize,
}

impl DenseBlock {
    fn new(n: usize, cin: usize, growth: usize, seed: u64, name: &str) -> Self {
        let layers = (0..n)
            .map(|i| DenseLayer::new(cin + i * growth, growth, seed, &join(name, &format!("denselayer{}", i + 1))))
            .collect();
        Self { layers, cin, growth }
    }
}

impl Layer for DenseBlock {
    fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let mut feats = x;
        for l in &mut self.layers {
            let new = l.layers.forward(feats.clone(), mode);
            feats = concat_channels(&[&feats, &new]);
        }
        feats
    }

    fn infer(&self, x: Tensor) -> Tensor {
        let mut feats = x;
        for l in &self.layers {
            let new = l.layers.infer(feats.clone());
            feats = concat_channels(&[&feats, &new]);
        }
        feats
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            let c_in = self.cin + i * self.growth;
            let g_out = slice_channels(&grad, c_in, c_in + self.growth);
            let g_in = l.layers.backward(g_out);
            grad = slice_channels(&grad, 0, c_in);
            add_into_channels(&mut grad, &g_in, 0);
        }
        grad
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.layers.visit(&join(prefix, &format!("denselayer{}.layers", i + 1)), v);
        }
    }

    fn fold_pattern(&self, h: &mut u64) {
        for l in &self.layers {
            l.layers.fold_pattern(h);
        }
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Bottleneck residual unit: 1x1 -> 3x3x3 (strided) -> 1x1 (x4), plus an
/// identity or projected shortcut, followed by relu.
#[derive(Clone)]
struct Bottleneck {
    main: Sequential,
    shortcut: Option<Sequential>,
    relu: Relu,
}

impl Bottleneck {
    fn new(inplanes: usize, planes: usize, stride: [usize; 3], seed: u64, name: &str) -> Self {
        let out = planes * EXPANSION;
        let mut main = Sequential::new();
        main.push("conv1", Conv3d::new(inplanes, planes, Window::cube(1, 1, 0), false, seed, &join(name, "conv1")));
        main.push("bn1", BatchNorm3d::new(planes));
        main.push("relu1", Relu::default());
        let win = Window {
            kernel: [3; 3],
            stride,
            padding: [1; 3],
        };
        main.push("conv2", Conv3d::new(planes, planes, win, false, seed, &join(name, "conv2")));
        main.push("bn2", BatchNorm3d::new(planes));
        main.push("relu2", Relu::default());
        main.push("conv3", Conv3d::new(planes, out, Window::cube(1, 1, 0), false, seed, &join(name, "conv3")));
        main.push("bn3", BatchNorm3d::new(out));
        let shortcut = (stride != [1; 3] || inplanes != out).then(|| {
            let mut s = Sequential::new();
            let win = Window {
                kernel: [1; 3],
                stride,
                padding: [0; 3],
            };
            s.push("0", Conv3d::new(inplanes, out, win, false, seed, &join(name, "downsample.0")));
            s.push("1", BatchNorm3d::new(out));
            s
        });
        Self {
            main,
            shortcut,
            relu: Relu::default(),
        }
    }

    fn combine(main: Tensor, short: &Tensor) -> Tensor {
        let mut y = main;
        for (a, b) in y.data_mut().iter_mut().zip(short.data()) {
            *a += b;
        }
        y
    }
}

impl Layer for Bottleneck {
    fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let short = match &mut self.shortcut {
            Some(s) => s.forward(x.clone(), mode),
            None => x.clone(),
        };
        let y = Self::combine(self.main.forward(x, mode), &short);
        self.relu.forward(y, mode)
    }

    fn infer(&self, x: Tensor) -> Tensor {
        let short = match &self.shortcut {
            Some(s) => s.infer(x.clone()),
            None => x.clone(),
        };
        let y = Self::combine(self.main.infer(x), &short);
        self.relu.infer(y)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.relu.backward(grad);
        let g_short = match &mut self.shortcut {
            Some(s) => s.backward(g.clone()),
            None => g.clone(),
        };
        Self::combine(self.main.backward(g), &g_short)
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        self.main.visit(prefix, v);
        if let Some(s) = &mut self.shortcut {
            s.visit(&join(prefix, "downsample"), v);
        }
    }

    fn fold_pattern(&self, h: &mut u64) {
        self.main.fold_pattern(h);
        if let Some(s) = &self.shortcut {
            s.fold_pattern(h);
        }
        self.relu.fold_pattern(h);
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// In-plane stride 2 on every downsampling stage; Z stride per stage from
/// `z_down`.
fn stride(z_down: bool) -> [usize; 3] {
    [if z_down { 2 } else { 1 }, 2, 2]
}

fn stem(cfg: &ModelConfig, cout: usize, z_down: &[bool], net: &mut Sequential, names: [&str; 4]) {
    let conv = Window {
        kernel: [7; 3],
        stride: stride(z_down[0]),
        padding: [3; 3],
    };
    let mut c0 = Conv3d::new(cfg.in_channels, cout, conv, false, cfg.seed, names[0]);
    c0.input_grad = false;
    net.push(names[0].rsplit('.').next().unwrap(), c0);
    net.push(names[1], BatchNorm3d::new(cout));
    net.push(names[2], Relu::default());
    let pool = Window {
        kernel: [3; 3],
        stride: stride(z_down[1]),
        padding: [1; 3],
    };
    net.push(names[3], MaxPool3d::new(pool));
}

pub(super) fn build(cfg: &ModelConfig, z_down: &[bool]) -> Sequential {
    match cfg.family {
        Family::Densenet => build_densenet(cfg, z_down),
        Family::Resnet => build_resnet(cfg, z_down),
    }
}

fn build_densenet(cfg: &ModelConfig, z_down: &[bool]) -> Sequential {
    let seed = cfg.seed;
    let mut features = Sequential::new();
    stem(cfg, cfg.init_features, z_down, &mut features, ["features.conv0", "norm0", "relu0", "pool0"]);
    let mut ch = cfg.init_features;
    let nb = cfg.block_layers.len();
    for (i, &n) in cfg.block_layers.iter().enumerate() {
        let name = format!("denseblock{}", i + 1);
        features.push(name.clone(), DenseBlock::new(n, ch, cfg.growth_rate, seed, &join("features", &name)));
        ch += n * cfg.growth_rate;
        if i + 1 < nb {
            let tname = join("features", &format!("transition{}", i + 1));
            let mut t = Sequential::new();
            t.push("norm", BatchNorm3d::new(ch));
            t.push("relu", Relu::default());
            t.push("conv", Conv3d::new(ch, ch / 2, Window::cube(1, 1, 0), false, seed, &join(&tname, "conv")));
            t.push("pool", AvgPool3d::new([if z_down[i + 2] { 2 } else { 1 }, 2, 2]));
            features.push(format!("transition{}", i + 1), t);
            ch /= 2;
        }
    }
    features.push("norm5", BatchNorm3d::new(ch));
    let mut head = Sequential::new();
    head.push("relu", Relu::default());
    head.push("pool", GlobalAvgPool::default());
    head.push("out", Linear::new(ch, cfg.num_classes, seed, "class_layers.out"));
    let mut net = Sequential::new();
    net.push("features", features);
    net.push("class_layers", head);
    net
}

fn build_resnet(cfg: &ModelConfig, z_down: &[bool]) -> Sequential {
    let seed = cfg.seed;
    let mut net = Sequential::new();
    stem(cfg, cfg.init_features, z_down, &mut net, ["conv1", "bn1", "relu", "maxpool"]);
    let mut inplanes = cfg.init_features;
    for (i, &n) in cfg.block_layers.iter().enumerate() {
        let planes = cfg.init_features << i;
        let first_stride = if i == 0 { [1; 3] } else { stride(z_down[i + 1]) };
        let lname = format!("layer{}", i + 1);
        let mut stage = Sequential::new();
        for j in 0..n {
            let s = if j == 0 { first_stride } else { [1; 3] };
            stage.push(j.to_string(), Bottleneck::new(inplanes, planes, s, seed, &format!("{lname}.{j}")));
            inplanes = planes * EXPANSION;
        }
        net.push(lname, stage);
    }
    net.push("avgpool", GlobalAvgPool::default());
    net.push("fc", Linear::new(inplanes, cfg.num_classes, seed, "fc"));
    net
}
