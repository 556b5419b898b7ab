//! Decoder heads turning encoder pyramids into class-score maps.
//!
//! All in-decoder upsampling is nearest-neighbor with repeat semantics, so
//! stacked 2x steps compose exactly with a single wide step; this is what
//! makes the fcn8/fcn32 fusion identity hold bitwise when the auxiliary
//! score paths are zero. Bilinear interpolation appears only where feature
//! maps of unrelated sizes meet (pyramid-pooling branches) and in the final
//! distribution resize.

use super::{DecoderKind, ModelSpec, NetCtx};
use crate::backend::VarId;
use crate::error::Result;

/// Channel plan of the upsampling path at strides 16, 8, 4, 2, 1.
const UP_CHANNELS: [usize; 5] = [256, 128, 64, 32, 16];

/// Build the decoder for `spec` on the encoder taps; returns class scores
/// (pre-softmax) at the decoder's native stride.
pub(crate) fn build(ctx: &mut NetCtx, spec: &ModelSpec, taps: &[VarId]) -> Result<VarId> {
    let k = spec.n_classes;
    match spec.decoder {
        DecoderKind::Segnet => segnet(ctx, taps, k),
        DecoderKind::Unet => unet(ctx, taps, k),
        DecoderKind::Fcn32 => fcn32(ctx, taps, k),
        DecoderKind::Fcn8 => fcn8(ctx, taps, k),
        DecoderKind::Pspnet => pspnet(ctx, taps, k),
    }
}

fn head(ctx: &mut NetCtx, x: VarId, k: usize) -> Result<VarId> {
    ctx.conv("head", x, k, 1, 1)
}

/// Plain upsampling decoder from the deepest feature, no encoder skips:
/// five rounds of (2x nearest upsample → 3x3 conv → bn → relu).
fn segnet(ctx: &mut NetCtx, taps: &[VarId], k: usize) -> Result<VarId> {
    let mut x = taps[4];
    for (i, &c) in UP_CHANNELS.iter().enumerate() {
        x = ctx.scope(&format!("up{}", i + 1), |ctx| {
            let x = ctx.graph().upsample_nearest(x, 2);
            ctx.conv_bn_relu("conv", x, c, 3, 1)
        })?;
    }
    head(ctx, x, k)
}

/// Upsampling path with skip concatenation: at each step the same-stride
/// encoder feature joins along channels, then two conv blocks refine.
/// The last step up to stride 1 has no encoder counterpart.
fn unet(ctx: &mut NetCtx, taps: &[VarId], k: usize) -> Result<VarId> {
    let mut x = taps[4];
    for (i, &c) in UP_CHANNELS.iter().enumerate() {
        let skip = if i < 4 { Some(taps[3 - i]) } else { None };
        x = ctx.scope(&format!("up{}", i + 1), |ctx| {
            let mut x = ctx.graph().upsample_nearest(x, 2);
            if let Some(skip) = skip {
                x = ctx.graph().concat_channels(&[x, skip])?;
            }
            let x = ctx.conv_bn_relu("conv1", x, c, 3, 1)?;
            ctx.conv_bn_relu("conv2", x, c, 3, 1)
        })?;
    }
    head(ctx, x, k)
}

/// Single 1x1 class-score conv on the deepest feature, one wide 32x
/// upsample back to input resolution.
fn fcn32(ctx: &mut NetCtx, taps: &[VarId], k: usize) -> Result<VarId> {
    let scores = ctx.conv("score5", taps[4], k, 1, 1)?;
    Ok(ctx.graph().upsample_nearest(scores, 32))
}

/// Progressive score fusion: stride-32 scores upsampled and added to
/// stride-16 scores, again to stride-8 scores, then one 8x upsample.
fn fcn8(ctx: &mut NetCtx, taps: &[VarId], k: usize) -> Result<VarId> {
    let s5 = ctx.conv("score5", taps[4], k, 1, 1)?;
    let s4 = ctx.conv("score4", taps[3], k, 1, 1)?;
    let s3 = ctx.conv("score3", taps[2], k, 1, 1)?;
    let up5 = ctx.graph().upsample_nearest(s5, 2);
    let f4 = ctx.graph().add(up5, s4)?;
    let up4 = ctx.graph().upsample_nearest(f4, 2);
    let f3 = ctx.graph().add(up4, s3)?;
    Ok(ctx.graph().upsample_nearest(f3, 8))
}

/// Pyramid pooling on the stride-8 feature: average-pool to 1, 2, 3 and 6
/// bin grids, project each with a 1x1 conv block, resize back and
/// concatenate with the input feature, then fuse with a 3x3 conv block.
/// Scores stay at stride 8 (the model resizes the distribution map).
fn pspnet(ctx: &mut NetCtx, taps: &[VarId], k: usize) -> Result<VarId> {
    let f3 = taps[2];
    let (_, c3, h3, w3) = ctx.graph().dim4(f3);
    let branch_c = (c3 / 4).max(8);
    let mut parts = vec![f3];
    for &bins in &[1usize, 2, 3, 6] {
        let b = ctx.scope(&format!("bin{bins}"), |ctx| {
            let pooled = ctx.graph().avgpool_bins(f3, bins)?;
            let proj = ctx.conv_bn_relu("proj", pooled, branch_c, 1, 1)?;
            Ok(ctx.graph().resize_bilinear(proj, h3, w3))
        })?;
        parts.push(b);
    }
    let stacked = ctx.graph().concat_channels(&parts)?;
    let fused = ctx.conv_bn_relu("fuse", stacked, c3, 3, 1)?;
    head(ctx, fused, k)
}
