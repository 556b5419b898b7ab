//! Encoder backbones producing feature pyramids at strides 2..32.
//!
//! `plain` is a compact conv/batch-norm stack; the others follow the cited
//! classification backbones with taps after each downsampling stage. The
//! plain and mobilenet encoders carry batch norm throughout; vgg keeps its
//! original norm-free conv+relu blocks.

use super::{EncoderKind, NetCtx};
use crate::backend::VarId;
use crate::error::Result;

/// Channel count of each pyramid level (strides 2, 4, 8, 16, 32).
pub fn encoder_channels(kind: EncoderKind) -> [usize; 5] {
    match kind {
        EncoderKind::Plain => [32, 64, 128, 256, 512],
        EncoderKind::Vgg => [64, 128, 256, 512, 512],
        EncoderKind::Resnet50 => [64, 256, 512, 1024, 2048],
        EncoderKind::Mobilenet => [64, 128, 256, 512, 1024],
    }
}

/// Build the first `depth` pyramid levels, returning one tap per stage.
pub(crate) fn build_pyramid(
    ctx: &mut NetCtx,
    kind: EncoderKind,
    input: VarId,
    depth: usize,
) -> Result<Vec<VarId>> {
    match kind {
        EncoderKind::Plain => plain(ctx, input, depth),
        EncoderKind::Vgg => vgg(ctx, input, depth),
        EncoderKind::Resnet50 => resnet50(ctx, input, depth),
        EncoderKind::Mobilenet => mobilenet(ctx, input, depth),
    }
}

/// Five blocks of (3x3 conv → bn → relu)×2 followed by 2x2 max pooling.
fn plain(ctx: &mut NetCtx, input: VarId, depth: usize) -> Result<Vec<VarId>> {
    let channels = encoder_channels(EncoderKind::Plain);
    let mut taps = Vec::with_capacity(depth);
    let mut x = input;
    for (i, &c) in channels.iter().take(depth).enumerate() {
        x = ctx.scope(&format!("stage{}", i + 1), |ctx| {
            let x = ctx.conv_bn_relu("conv1", x, c, 3, 1)?;
            let x = ctx.conv_bn_relu("conv2", x, c, 3, 1)?;
            Ok(ctx.maxpool(x, 2, 2, 0))
        })?;
        taps.push(x);
    }
    Ok(taps)
}

/// VGG-16 convolutional stages: [2, 2, 3, 3, 3] conv+relu layers per stage,
/// 2x2 max pooling between stages.
fn vgg(ctx: &mut NetCtx, input: VarId, depth: usize) -> Result<Vec<VarId>> {
    let channels = encoder_channels(EncoderKind::Vgg);
    let conv_counts = [2usize, 2, 3, 3, 3];
    let mut taps = Vec::with_capacity(depth);
    let mut x = input;
    for i in 0..depth {
        x = ctx.scope(&format!("stage{}", i + 1), |ctx| {
            let mut x = x;
            for j in 0..conv_counts[i] {
                x = ctx.conv(&format!("conv{}", j + 1), x, channels[i], 3, 1)?;
                x = ctx.graph().relu(x);
            }
            Ok(ctx.maxpool(x, 2, 2, 0))
        })?;
        taps.push(x);
    }
    Ok(taps)
}

/// ResNet-50: 7x7/2 stem, 3x3/2 max pool, then bottleneck stages of
/// [3, 4, 6, 3] blocks with projection shortcuts on stage entry.
fn resnet50(ctx: &mut NetCtx, input: VarId, depth: usize) -> Result<Vec<VarId>> {
    let mut taps = Vec::with_capacity(depth);
    let mut x = ctx.scope("stem", |ctx| ctx.conv_bn_relu("conv", input, 64, 7, 2))?;
    taps.push(x);
    if depth == 1 {
        return Ok(taps);
    }
    x = ctx.maxpool(x, 3, 2, 1);
    let stages: [(usize, usize, usize, usize); 4] = [
        // (blocks, mid channels, out channels, first-block stride)
        (3, 64, 256, 1),
        (4, 128, 512, 2),
        (6, 256, 1024, 2),
        (3, 512, 2048, 2),
    ];
    for (si, &(blocks, mid, out, stride)) in stages.iter().enumerate().take(depth - 1) {
        x = ctx.scope(&format!("stage{}", si + 2), |ctx| {
            let mut x = x;
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                x = ctx.scope(&format!("block{b}"), |ctx| bottleneck(ctx, x, mid, out, s))?;
            }
            Ok(x)
        })?;
        taps.push(x);
    }
    Ok(taps)
}

fn bottleneck(ctx: &mut NetCtx, x: VarId, mid: usize, out: usize, stride: usize) -> Result<VarId> {
    let c_in = ctx.graph().dim4(x).1;
    let shortcut = if c_in != out || stride != 1 {
        let p = ctx.conv("proj.conv", x, out, 1, stride)?;
        ctx.batch_norm("proj.bn", p)?
    } else {
        x
    };
    let y = ctx.conv_bn_relu("conv1", x, mid, 1, stride)?;
    let y = ctx.conv_bn_relu("conv2", y, mid, 3, 1)?;
    let y = ctx.conv("conv3.conv", y, out, 1, 1)?;
    let y = ctx.batch_norm("conv3.bn", y)?;
    let sum = ctx.graph().add(y, shortcut)?;
    Ok(ctx.graph().relu(sum))
}

/// MobileNet v1: 3x3/2 stem then 13 depthwise-separable blocks, strided
/// depthwise convs doing the downsampling.
fn mobilenet(ctx: &mut NetCtx, input: VarId, depth: usize) -> Result<Vec<VarId>> {
    // (depthwise stride, pointwise out channels, tap after this block?)
    let blocks: [(usize, usize, bool); 13] = [
        (1, 64, true),
        (2, 128, false),
        (1, 128, true),
        (2, 256, false),
        (1, 256, true),
        (2, 512, false),
        (1, 512, false),
        (1, 512, false),
        (1, 512, false),
        (1, 512, false),
        (1, 512, true),
        (2, 1024, false),
        (1, 1024, true),
    ];
    let mut x = ctx.scope("stem", |ctx| ctx.conv_bn_relu("conv", input, 32, 3, 2))?;
    let mut taps = Vec::with_capacity(depth);
    for (i, &(stride, c_out, tap)) in blocks.iter().enumerate() {
        x = ctx.scope(&format!("block{}", i + 1), |ctx| {
            let x = ctx.depthwise("dw", x, 3, stride)?;
            let x = ctx.batch_norm("dw_bn", x)?;
            let x = ctx.graph().relu(x);
            let x = ctx.conv("pw", x, c_out, 1, 1)?;
            let x = ctx.batch_norm("pw_bn", x)?;
            Ok(ctx.graph().relu(x))
        })?;
        if tap {
            taps.push(x);
            if taps.len() == depth {
                break;
            }
        }
    }
    Ok(taps)
}
