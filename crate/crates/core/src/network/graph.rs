//! Static computation-graph description of the full architecture:
//! backbone, weighted feature-fusion neck, shared detection head and the
//! two segmentation heads. The same graph is executed for inference and
//! training and walked symbolically by the cost analyzer, so the three
//! views can never drift apart.

use crate::error::Result;
use crate::network::config::{BackboneKind, ModelConfig};

pub const BN_EPS: f64 = 1e-5;
pub const MERGE_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    HeUniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub dims: [usize; 4],
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    Input,
    Conv {
        w: usize,
        b: Option<usize>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mu: usize,
        var: usize,
    },
    Relu,
    Relu6,
    Add,
    Concat,
    MaxPool {
        k: usize,
        s: usize,
        pad: usize,
    },
    /// Bilinear resize to the spatial dims of another (earlier) node.
    ResizeLike {
        reference: usize,
    },
    /// Bilinear resize to the full input resolution.
    ResizeToInput,
    WeightedMerge {
        w: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    pub label: String,
}

/// Node ids of the externally meaningful feature maps.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub input: usize,
    pub c2: usize,
    pub c3: usize,
    pub c4: usize,
    pub c5: usize,
    pub p3: usize,
    pub p4: usize,
    pub p5: usize,
    /// Raw detection maps at strides 8, 16, 32.
    pub det: [usize; 3],
    pub drivable: usize,
    pub lane: usize,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    pub taps: Taps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    Relu,
    Relu6,
    None,
}

struct Builder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    /// Channel count of every node, used to size parameters.
    channels: Vec<usize>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            nodes: Vec::new(),
            params: Vec::new(),
            channels: Vec::new(),
        }
    }

    fn push(&mut self, op: NodeOp, inputs: Vec<usize>, label: String, c: usize) -> usize {
        self.nodes.push(Node { op, inputs, label });
        self.channels.push(c);
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, dims: [usize; 4], init: Init, trainable: bool) -> usize {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter {name}"
        );
        self.params.push(ParamSpec {
            name,
            dims,
            init,
            trainable,
        });
        self.params.len() - 1
    }

    fn input(&mut self) -> usize {
        self.push(NodeOp::Input, vec![], "input".into(), 3)
    }

    fn conv_params(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> (usize, Option<usize>) {
        let w = self.param(
            format!("{prefix}.w"),
            [cout, cin / groups, k, k],
            Init::HeUniform,
            true,
        );
        let b = bias.then(|| self.param(format!("{prefix}.b"), [1, cout, 1, 1], Init::Zeros, true));
        (w, b)
    }

    fn bn_params(&mut self, prefix: &str, c: usize) -> (usize, usize, usize, usize) {
        let gamma = self.param(format!("{prefix}.gamma"), [1, c, 1, 1], Init::Ones, true);
        let beta = self.param(format!("{prefix}.beta"), [1, c, 1, 1], Init::Zeros, true);
        // Running statistics: serialized and counted, never trained.
        let mu = self.param(format!("{prefix}.mean"), [1, c, 1, 1], Init::Zeros, false);
        let var = self.param(format!("{prefix}.var"), [1, c, 1, 1], Init::Ones, false);
        (gamma, beta, mu, var)
    }

    /// conv (no bias) + batchnorm + activation, the standard block unit.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn_act(
        &mut self,
        prefix: &str,
        x: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        act: Act,
    ) -> usize {
        let (w, b) = self.conv_params(&format!("{prefix}.conv"), cin, cout, k, groups, false);
        let conv = self.push(
            NodeOp::Conv {
                w,
                b,
                stride: (stride, stride),
                pad: (pad, pad),
                groups,
            },
            vec![x],
            format!("{prefix}.conv"),
            cout,
        );
        let (gamma, beta, mu, var) = self.bn_params(&format!("{prefix}.bn"), cout);
        let bn = self.push(
            NodeOp::BatchNorm {
                gamma,
                beta,
                mu,
                var,
            },
            vec![conv],
            format!("{prefix}.bn"),
            cout,
        );
        self.activation(prefix, bn, cout, act)
    }

    fn activation(&mut self, prefix: &str, x: usize, c: usize, act: Act) -> usize {
        match act {
            Act::Relu => self.push(NodeOp::Relu, vec![x], format!("{prefix}.relu"), c),
            Act::Relu6 => self.push(NodeOp::Relu6, vec![x], format!("{prefix}.relu6"), c),
            Act::None => x,
        }
    }

    /// Conv node reusing existing parameters (shared detection head).
    fn conv_shared(
        &mut self,
        label: String,
        x: usize,
        w: usize,
        b: Option<usize>,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> usize {
        self.push(
            NodeOp::Conv {
                w,
                b,
                stride: (stride, stride),
                pad: (pad, pad),
                groups: 1,
            },
            vec![x],
            label,
            cout,
        )
    }

    fn bn_shared(
        &mut self,
        label: String,
        x: usize,
        p: (usize, usize, usize, usize),
        c: usize,
    ) -> usize {
        self.push(
            NodeOp::BatchNorm {
                gamma: p.0,
                beta: p.1,
                mu: p.2,
                var: p.3,
            },
            vec![x],
            label,
            c,
        )
    }

    fn merge(&mut self, prefix: &str, inputs: Vec<usize>, c: usize) -> usize {
        let k = inputs.len();
        let w = self.param(format!("{prefix}.w"), [k, 1, 1, 1], Init::Ones, true);
        self.push(NodeOp::WeightedMerge { w }, inputs, prefix.to_string(), c)
    }
}

/// ResNet50-style backbone: 7x7/2 stem + 3x3/2 maxpool, bottleneck stages
/// of 3/4/6/3 blocks with outputs 256/512/1024/2048.
fn build_resnet50(b: &mut Builder, input: usize) -> (usize, usize, usize, usize, [usize; 4]) {
    let stem = b.conv_bn_act("backbone.stem", input, 3, 64, 7, 2, 3, 1, Act::Relu);
    let pool = b.push(
        NodeOp::MaxPool { k: 3, s: 2, pad: 1 },
        vec![stem],
        "backbone.stem.pool".into(),
        64,
    );

    let mut taps = [0usize; 4];
    let mut x = pool;
    let mut cin = 64;
    let stage_blocks = [3, 4, 6, 3];
    let stage_mid = [64, 128, 256, 512];
    for (si, (&blocks, &mid)) in stage_blocks.iter().zip(&stage_mid).enumerate() {
        let cout = mid * 4;
        for bi in 0..blocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let prefix = format!("backbone.layer{}.{}", si + 1, bi);
            let c1 = b.conv_bn_act(&format!("{prefix}.1x1a"), x, cin, mid, 1, 1, 0, 1, Act::Relu);
            let c2 = b.conv_bn_act(&format!("{prefix}.3x3"), c1, mid, mid, 3, stride, 1, 1, Act::Relu);
            let c3 = b.conv_bn_act(&format!("{prefix}.1x1b"), c2, mid, cout, 1, 1, 0, 1, Act::None);
            let shortcut = if stride != 1 || cin != cout {
                b.conv_bn_act(&format!("{prefix}.down"), x, cin, cout, 1, stride, 0, 1, Act::None)
            } else {
                x
            };
            let sum = b.push(
                NodeOp::Add,
                vec![c3, shortcut],
                format!("{prefix}.add"),
                cout,
            );
            x = b.activation(&format!("{prefix}.out"), sum, cout, Act::Relu);
            cin = cout;
        }
        taps[si] = x;
    }
    (taps[0], taps[1], taps[2], taps[3], [256, 512, 1024, 2048])
}

/// MobileNetV2-style backbone: canonical inverted-residual sequence at
/// width multiplier 1.0, tapped at strides 4/8/16/32.
fn build_mobilenetv2(b: &mut Builder, input: usize) -> (usize, usize, usize, usize, [usize; 4]) {
    let mut x = b.conv_bn_act("backbone.stem", input, 3, 32, 3, 2, 1, 1, Act::Relu6);
    let mut cin = 32;
    // (expansion t, output channels, repeats, first stride)
    let stages: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut stage_out = [0usize; 7];
    for (si, &(t, cout, reps, s0)) in stages.iter().enumerate() {
        for bi in 0..reps {
            let stride = if bi == 0 { s0 } else { 1 };
            let prefix = format!("backbone.stage{si}.{bi}");
            let hidden = cin * t;
            let mut y = x;
            let mut c = cin;
            if t != 1 {
                y = b.conv_bn_act(&format!("{prefix}.expand"), y, c, hidden, 1, 1, 0, 1, Act::Relu6);
                c = hidden;
            }
            y = b.conv_bn_act(&format!("{prefix}.dw"), y, c, c, 3, stride, 1, c, Act::Relu6);
            y = b.conv_bn_act(&format!("{prefix}.project"), y, c, cout, 1, 1, 0, 1, Act::None);
            x = if stride == 1 && cin == cout {
                b.push(NodeOp::Add, vec![y, x], format!("{prefix}.add"), cout)
            } else {
                y
            };
            cin = cout;
        }
        stage_out[si] = x;
    }
    (
        stage_out[1],
        stage_out[2],
        stage_out[4],
        stage_out[6],
        [24, 32, 96, 320],
    )
}

pub fn build_graph(config: &ModelConfig) -> Result<Graph> {
    config.validate()?;
    let mut b = Builder::new();
    let input = b.input();

    let (c2, c3, c4, c5, ch) = match config.backbone {
        BackboneKind::Resnet50 => build_resnet50(&mut b, input),
        BackboneKind::Mobilenetv2 => build_mobilenetv2(&mut b, input),
    };

    let fw = config.fusion_width;
    let lat3 = b.conv_bn_act("fusion.lat3", c3, ch[1], fw, 1, 1, 0, 1, Act::None);
    let lat4 = b.conv_bn_act("fusion.lat4", c4, ch[2], fw, 1, 1, 0, 1, Act::None);
    let lat5 = b.conv_bn_act("fusion.lat5", c5, ch[3], fw, 1, 1, 0, 1, Act::None);

    // Weighted feature fusion: per repeat a top-down pass (upsample +
    // fast-normalized merge + conv) then a bottom-up pass (maxpool
    // downsample + merge + conv).
    let (mut x3, mut x4, mut x5) = (lat3, lat4, lat5);
    for r in 0..config.fusion_repeats {
        let pre = format!("fusion.r{r}");
        let up5 = b.push(
            NodeOp::ResizeLike { reference: x4 },
            vec![x5],
            format!("{pre}.up5"),
            fw,
        );
        let m4 = b.merge(&format!("{pre}.td4.merge"), vec![x4, up5], fw);
        let td4 = b.conv_bn_act(&format!("{pre}.td4"), m4, fw, fw, 3, 1, 1, 1, Act::Relu);

        let up4 = b.push(
            NodeOp::ResizeLike { reference: x3 },
            vec![td4],
            format!("{pre}.up4"),
            fw,
        );
        let m3 = b.merge(&format!("{pre}.td3.merge"), vec![x3, up4], fw);
        let td3 = b.conv_bn_act(&format!("{pre}.td3"), m3, fw, fw, 3, 1, 1, 1, Act::Relu);

        let d3 = b.push(
            NodeOp::MaxPool { k: 2, s: 2, pad: 0 },
            vec![td3],
            format!("{pre}.down3"),
            fw,
        );
        let m4b = b.merge(&format!("{pre}.bu4.merge"), vec![x4, td4, d3], fw);
        let bu4 = b.conv_bn_act(&format!("{pre}.bu4"), m4b, fw, fw, 3, 1, 1, 1, Act::Relu);

        let d4 = b.push(
            NodeOp::MaxPool { k: 2, s: 2, pad: 0 },
            vec![bu4],
            format!("{pre}.down4"),
            fw,
        );
        let m5 = b.merge(&format!("{pre}.bu5.merge"), vec![x5, d4], fw);
        let bu5 = b.conv_bn_act(&format!("{pre}.bu5"), m5, fw, fw, 3, 1, 1, 1, Act::Relu);

        (x3, x4, x5) = (td3, bu4, bu5);
    }
    let (p3, p4, p5) = (x3, x4, x5);

    // Detection head, shared across the three scales.
    let det_c = config.det_channels();
    let (h1w, _) = b.conv_params("det.conv1", fw, fw, 3, 1, false);
    let bn1 = b.bn_params("det.bn1", fw);
    let (h2w, _) = b.conv_params("det.conv2", fw, fw, 3, 1, false);
    let bn2 = b.bn_params("det.bn2", fw);
    let (pw, pb) = b.conv_params("det.pred", fw, det_c, 1, 1, true);
    let mut det = [0usize; 3];
    for (i, (p, name)) in [(p3, "p3"), (p4, "p4"), (p5, "p5")].iter().enumerate() {
        let mut y = b.conv_shared(format!("det.{name}.conv1"), *p, h1w, None, fw, 1, 1);
        y = b.bn_shared(format!("det.{name}.bn1"), y, bn1, fw);
        y = b.activation(&format!("det.{name}.a1"), y, fw, Act::Relu);
        y = b.conv_shared(format!("det.{name}.conv2"), y, h2w, None, fw, 1, 1);
        y = b.bn_shared(format!("det.{name}.bn2"), y, bn2, fw);
        y = b.activation(&format!("det.{name}.a2"), y, fw, Act::Relu);
        det[i] = b.conv_shared(format!("det.{name}.pred"), y, pw, pb, det_c, 1, 0);
    }

    // Segmentation heads: p3 upsampled to stride 4, concatenated with the
    // projected low-level skip, two 3x3 convs, 2-channel predictor,
    // full-resolution bilinear upsample.
    let p3up = b.push(
        NodeOp::ResizeLike { reference: c2 },
        vec![p3],
        "seg.p3up".into(),
        fw,
    );
    let mut seg_out = [0usize; 2];
    for (i, head) in ["drivable", "lane"].iter().enumerate() {
        let pre = format!("seg.{head}");
        let proj = b.conv_bn_act(&format!("{pre}.proj"), c2, ch[0], config.skip_proj_width, 1, 1, 0, 1, Act::Relu);
        let cat = b.push(
            NodeOp::Concat,
            vec![p3up, proj],
            format!("{pre}.cat"),
            fw + config.skip_proj_width,
        );
        let y = b.conv_bn_act(
            &format!("{pre}.conv1"),
            cat,
            fw + config.skip_proj_width,
            config.seg_width,
            3,
            1,
            1,
            1,
            Act::Relu,
        );
        let y = b.conv_bn_act(&format!("{pre}.conv2"), y, config.seg_width, config.seg_width, 3, 1, 1, 1, Act::Relu);
        let (predw, predb) = b.conv_params(&format!("{pre}.pred"), config.seg_width, 2, 1, 1, true);
        let y = b.push(
            NodeOp::Conv {
                w: predw,
                b: predb,
                stride: (1, 1),
                pad: (0, 0),
                groups: 1,
            },
            vec![y],
            format!("{pre}.pred"),
            2,
        );
        seg_out[i] = b.push(
            NodeOp::ResizeToInput,
            vec![y],
            format!("{pre}.full"),
            2,
        );
    }

    Ok(Graph {
        nodes: b.nodes,
        params: b.params,
        taps: Taps {
            input,
            c2,
            c3,
            c4,
            c5,
            p3,
            p4,
            p5,
            det,
            drivable: seg_out[0],
            lane: seg_out[1],
        },
    })
}

impl Graph {
    /// Parameter-group prefix for the freeze schedule.
    pub fn group_prefixes(group: crate::training::ParamGroup) -> &'static [&'static str] {
        use crate::training::ParamGroup::*;
        match group {
            SegHeads => &["seg."],
            DetHead => &["det."],
            Fusion => &["fusion."],
            Backbone => &["backbone."],
        }
    }
}
