use super::graph::{Graph, GraphBuilder, LayerId, LayerKind};
use super::{ModelConfig, Variant};
use crate::error::{Error, Result};

/// Init gain for layers feeding a rectifier; SeLU and linear layers use 1.
const RECTIFIER_GAIN: f64 = 2.0;

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, groups: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding: kernel / 2,
        groups,
    }
}

/// Encoder/decoder network applied to every input channel separately with
/// shared weights. Output shape equals input shape.
pub fn build_fcn(cfg: &ModelConfig) -> Result<Graph> {
    let d = &cfg.fcn_down_channels;
    if d.is_empty() || d.contains(&0) {
        return Err(Error::Config(format!("fcn_down_channels must be non-empty and positive, got {d:?}")));
    }
    let factor = 1usize << d.len();
    if !cfg.input_size.is_multiple_of(factor) {
        return Err(Error::Config(format!(
            "FCN input size {} is not divisible by {factor}",
            cfg.input_size
        )));
    }
    let depth = d.len();
    let mut g = GraphBuilder::new();
    let input = g.push("input", LayerKind::Input, &[]);
    let mut x = g.push("fcn.fold", LayerKind::FoldChannels, &[input]);

    let mut skips = Vec::with_capacity(depth);
    let mut prev = 1;
    for (i, &c) in d.iter().enumerate() {
        let c_id = g.push(format!("fcn.down{}", i + 1), conv(prev, c, 3, 2, 1), &[x]);
        x = g.push(format!("fcn.down{}.act", i + 1), LayerKind::Selu, &[c_id]);
        skips.push((x, c));
        prev = c;
    }

    // Decoder widths mirror the encoder; the last block halves the first width.
    let mut up_widths: Vec<usize> = d[..depth - 1].iter().rev().copied().collect();
    up_widths.push((d[0] / 2).max(1));

    let mut in_ch = d[depth - 1];
    for (j, &u) in up_widths.iter().enumerate() {
        if j > 0 {
            let (skip, skip_ch) = skips[depth - 1 - j];
            x = g.push(format!("fcn.up{}.cat", j + 1), LayerKind::Concat, &[x, skip]);
            in_ch += skip_ch;
        }
        let t = g.push(
            format!("fcn.up{}", j + 1),
            LayerKind::ConvTranspose2d {
                in_channels: in_ch,
                out_channels: u,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            &[x],
        );
        x = g.push(format!("fcn.up{}.act", j + 1), LayerKind::Selu, &[t]);
        in_ch = u;
    }
    x = g.push("fcn.out", conv(in_ch, 1, 1, 1, 1), &[x]);
    g.push(
        "fcn.unfold",
        LayerKind::UnfoldChannels {
            channels: cfg.input_channels,
        },
        &[x],
    );
    Ok(g.finish())
}

fn groups_for(name: &str, cardinality: usize, in_ch: usize, out_ch: usize) -> Result<usize> {
    let g = cardinality.min(in_ch).min(out_ch);
    if !in_ch.is_multiple_of(g) || !out_ch.is_multiple_of(g) {
        return Err(Error::Config(format!(
            "{name}: {g} groups do not divide {in_ch} input and {out_ch} output channels"
        )));
    }
    Ok(g)
}

pub fn build_aggrescnn(cfg: &ModelConfig) -> Result<Graph> {
    if cfg.variant != Variant::AggresCnn {
        return Err(Error::Config(format!("build_aggrescnn called with variant {:?}", cfg.variant)));
    }
    if cfg.stage_channels.is_empty() || cfg.blocks_per_stage == 0 || cfg.cardinality == 0 || cfg.stem_channels == 0 {
        return Err(Error::Config("AggResCNN needs stages, blocks, stem channels and cardinality".into()));
    }
    for w in cfg.stage_channels.windows(2) {
        if w[1] != 2 * w[0] {
            return Err(Error::Config(format!(
                "stage channels must double stage to stage, got {:?}",
                cfg.stage_channels
            )));
        }
    }
    let mut g = GraphBuilder::new();
    let input = g.push("input", LayerKind::Input, &[]);
    let stem = g.push("cls.stem", conv(cfg.input_channels, cfg.stem_channels, 3, 1, 1), &[input]);
    let mut x = g.push("cls.stem.act", LayerKind::Selu, &[stem]);
    let mut prev = cfg.stem_channels;

    for (s, &c) in cfg.stage_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let name = format!("cls.stage{}.block{}", s + 1, b + 1);
            let stride = if b == 0 { 2 } else { 1 };
            let ga = groups_for(&name, cfg.cardinality, prev, c)?;
            let gb = groups_for(&name, cfg.cardinality, c, c)?;
            let a = g.push(format!("{name}.conv1"), conv(prev, c, 3, stride, ga), &[x]);
            let a = g.push(format!("{name}.act1"), LayerKind::Selu, &[a]);
            let bb = g.push(format!("{name}.conv2"), conv(c, c, 3, 1, gb), &[a]);
            let bb = g.push(format!("{name}.act2"), LayerKind::Selu, &[bb]);
            let skip: LayerId = if stride != 1 || prev != c {
                g.push(format!("{name}.proj"), conv(prev, c, 1, stride, 1), &[x])
            } else {
                x
            };
            x = g.push(format!("{name}.add"), LayerKind::Add, &[bb, skip]);
            prev = c;
        }
    }
    let gap = g.push("cls.gap", LayerKind::GlobalAvgPool, &[x]);
    let fc = g.push(
        "cls.fc",
        LayerKind::Dense {
            in_features: prev,
            out_features: 2,
        },
        &[gap],
    );
    g.push("cls.softmax", LayerKind::Softmax, &[fc]);
    Ok(g.finish())
}

pub fn build_baseline_cnn(cfg: &ModelConfig) -> Result<Graph> {
    if cfg.variant != Variant::BaselineCnn {
        return Err(Error::Config(format!("build_baseline_cnn called with variant {:?}", cfg.variant)));
    }
    let b = &cfg.baseline;
    let mut g = GraphBuilder::new();
    let mut x = g.push("input", LayerKind::Input, &[]);
    let mut prev = cfg.input_channels;
    let mut side = cfg.input_size;
    for (i, &c) in b.conv_channels.iter().enumerate() {
        let name = format!("cls.conv{}", i + 1);
        x = g.push_with_gain(name.clone(), conv(prev, c, b.kernel, 1, 1), &[x], RECTIFIER_GAIN);
        x = g.push(format!("{name}.act"), LayerKind::Prelu { channels: c }, &[x]);
        x = g.push(
            format!("{name}.pool"),
            LayerKind::MaxPool {
                window: b.pool,
                stride: b.pool,
            },
            &[x],
        );
        if side < b.pool {
            return Err(Error::Config(format!(
                "input size {} too small for {} pooling stages of {}",
                cfg.input_size,
                b.conv_channels.len(),
                b.pool
            )));
        }
        side = (side - b.pool) / b.pool + 1;
        prev = c;
    }
    let features = prev * side * side;
    x = g.push("cls.flatten", LayerKind::Flatten, &[x]);
    x = g.push_with_gain(
        "cls.fc1",
        LayerKind::Dense {
            in_features: features,
            out_features: b.hidden,
        },
        &[x],
        RECTIFIER_GAIN,
    );
    x = g.push("cls.fc1.act", LayerKind::Prelu { channels: b.hidden }, &[x]);
    x = g.push(
        "cls.fc2",
        LayerKind::Dense {
            in_features: b.hidden,
            out_features: 2,
        },
        &[x],
    );
    g.push("cls.softmax", LayerKind::Softmax, &[x]);
    Ok(g.finish())
}
