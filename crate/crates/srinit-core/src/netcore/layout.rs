//! Static layout derived from a [`NetworkSpec`]: which blocks exist, their
//! channel flow, and their strides. Shared by the builder and the
//! checkpoint loader so a pruned model can be reconstructed from the spec
//! plus the list of surviving unit ids.

use super::{BlockKind, Family, NetworkSpec, UnitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitLayout {
    pub id: UnitId,
    /// 1-based stage index.
    pub stage_id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemLayout {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub bias: bool,
    /// `(kernel, stride, padding)` of a trailing max-pool, if any.
    pub max_pool: Option<(usize, usize, usize)>,
}

/// Stem configuration for a spec.
pub fn stem_layout(spec: &NetworkSpec) -> StemLayout {
    let first = spec.stages[0].channels;
    let stem_out = match spec.block_kind {
        BlockKind::Basic => first,
        // Bottleneck stages quote their output width; the stem feeds the
        // first block's reduced width.
        BlockKind::Bottleneck => first / 4,
    };
    match spec.family {
        Family::ResnetCifar | Family::TinyResnet => StemLayout {
            out_channels: stem_out,
            kernel: 3,
            stride: 1,
            padding: 1,
            batch_norm: true,
            bias: false,
            max_pool: None,
        },
        Family::ResnetImagenet => StemLayout {
            out_channels: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
            batch_norm: true,
            bias: false,
            max_pool: Some((3, 2, 1)),
        },
        Family::ResidualMlp => StemLayout {
            out_channels: stem_out,
            kernel: 1,
            stride: 1,
            padding: 0,
            batch_norm: false,
            bias: true,
            max_pool: None,
        },
    }
}

/// The full original block sequence of a spec, with stable ids.
pub fn unit_layouts(spec: &NetworkSpec) -> Vec<UnitLayout> {
    let mut out = Vec::with_capacity(spec.unit_count());
    let mut in_c = stem_layout(spec).out_channels;
    let mut next_id = 1u32;
    for (si, stage) in spec.stages.iter().enumerate() {
        for bi in 0..stage.block_count {
            let entry = bi == 0;
            let stride = if entry && stage.downsample && spec.family != Family::ResidualMlp {
                2
            } else {
                1
            };
            out.push(UnitLayout {
                id: UnitId(next_id),
                stage_id: si + 1,
                in_channels: in_c,
                out_channels: stage.channels,
                stride,
            });
            next_id += 1;
            in_c = stage.channels;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet56_has_27_units_two_projections() {
        let spec = NetworkSpec::resnet56(10);
        let lays = unit_layouts(&spec);
        assert_eq!(lays.len(), 27);
        let projections = lays
            .iter()
            .filter(|l| l.stride != 1 || l.in_channels != l.out_channels)
            .count();
        assert_eq!(projections, 2);
    }

    #[test]
    fn bottleneck_stem_feeds_reduced_width() {
        let spec = NetworkSpec::resnet50(1000);
        assert_eq!(stem_layout(&spec).out_channels, 64);
        let lays = unit_layouts(&spec);
        assert_eq!(lays.len(), 16);
        assert_eq!(lays[0].in_channels, 64);
        assert_eq!(lays[0].out_channels, 256);
    }
}
