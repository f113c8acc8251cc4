//! Block-level network descriptions, their validation, and the analytic
//! receptive-field and parameter-count calculators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference receptive field (px, one side) that computed values are shown next to.
pub const REFERENCE_RECEPTIVE_FIELD: usize = 1481;
/// Reference parameter count shown next to the computed one.
pub const REFERENCE_PARAMETER_COUNT: usize = 1_479_728;
/// Required composed output stride (2 µm input, 16 µm output).
pub const OUTPUT_STRIDE: usize = 8;
/// Scale of the atlas input grid relative to the image grid.
pub const ATLAS_SCALE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockRole {
    Input,
    Contracting,
    Bottom,
    Expansive,
    Output,
    AtlasInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            out_channels,
        }
    }

    /// Same padding for odd kernels.
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Image,
    Atlas,
}

/// Reference to the pre-pool output of a block, used as a skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRef {
    pub path: PathKind,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub role: BlockRole,
    pub convs: Vec<ConvSpec>,
    #[serde(default)]
    pub pool: bool,
    /// Output channels of the leading 2×2 stride-2 transposed convolution.
    #[serde(default)]
    pub upsample: Option<usize>,
    #[serde(default)]
    pub skips: Vec<SkipRef>,
}

impl BlockSpec {
    fn plain(role: BlockRole, convs: Vec<ConvSpec>) -> Self {
        Self {
            role,
            convs,
            pool: false,
            upsample: None,
            skips: Vec::new(),
        }
    }

    fn stride(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub name: String,
    pub image_path: Vec<BlockSpec>,
    #[serde(default)]
    pub atlas_path: Option<Vec<BlockSpec>>,
    pub classes: usize,
    #[serde(default)]
    pub atlas_channels: usize,
    #[serde(default = "one")]
    pub input_channels: usize,
}

fn one() -> usize {
    1
}

/// Channel widths of the U-shaped layout shared by all stock configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    pub input: [usize; 2],
    pub down: [usize; 4],
    pub bottom: usize,
    pub up: [usize; 3],
    pub head: usize,
    pub convs_per_block: usize,
    pub atlas_input: usize,
    pub atlas_down: [usize; 4],
}

impl Widths {
    pub const CANONICAL: Widths = Widths {
        input: [16, 16],
        down: [32, 64, 128, 256],
        bottom: 512,
        up: [256, 128, 64],
        head: 32,
        convs_per_block: 3,
        atlas_input: 16,
        atlas_down: [32, 64, 128, 256],
    };

    /// Same topology, reduced widths for CPU training at desk scale.
    pub const DESK: Widths = Widths {
        input: [8, 8],
        down: [8, 16, 32, 64],
        bottom: 64,
        up: [32, 16, 8],
        head: 8,
        convs_per_block: 3,
        atlas_input: 16,
        atlas_down: [8, 16, 32, 64],
    };
}

impl ArchitectureConfig {
    /// U-shaped layout: stride-4 input block, four contracting blocks, a
    /// bottom block, three expansive blocks and an output block. With `atlas`
    /// set, a second contracting path on the quarter-resolution atlas grid
    /// feeds every expansive block and joins at the bottom.
    pub fn unet(name: &str, w: &Widths, classes: usize, atlas: Option<usize>) -> Self {
        let n = w.convs_per_block;
        let block = |ch: usize| vec![ConvSpec::new(3, 1, ch); n];
        let mut image = vec![BlockSpec::plain(
            BlockRole::Input,
            vec![ConvSpec::new(5, 2, w.input[0]), ConvSpec::new(5, 2, w.input[1])],
        )];
        for &ch in &w.down {
            image.push(BlockSpec {
                pool: true,
                ..BlockSpec::plain(BlockRole::Contracting, block(ch))
            });
        }
        image.push(BlockSpec::plain(BlockRole::Bottom, block(w.bottom)));
        // expansive blocks 7, 8, 9 take skips from contracting blocks 5, 4, 3
        for (i, &ch) in w.up.iter().enumerate() {
            let src = 4 - i;
            let mut skips = vec![SkipRef {
                path: PathKind::Image,
                block: src,
            }];
            if atlas.is_some() {
                skips.push(SkipRef {
                    path: PathKind::Atlas,
                    block: src,
                });
            }
            image.push(BlockSpec {
                upsample: Some(ch),
                skips,
                ..BlockSpec::plain(BlockRole::Expansive, block(ch))
            });
        }
        image.push(BlockSpec::plain(
            BlockRole::Output,
            vec![ConvSpec::new(3, 1, w.head), ConvSpec::new(1, 1, classes)],
        ));
        let atlas_path = atlas.map(|_| {
            let mut p = vec![BlockSpec::plain(
                BlockRole::AtlasInput,
                vec![ConvSpec::new(5, 1, w.atlas_input)],
            )];
            for &ch in &w.atlas_down {
                p.push(BlockSpec {
                    pool: true,
                    ..BlockSpec::plain(BlockRole::Contracting, block(ch))
                });
            }
            p
        });
        Self {
            name: name.to_string(),
            image_path: image,
            atlas_path,
            classes,
            atlas_channels: atlas.unwrap_or(0),
            input_channels: 1,
        }
    }

    pub fn canonical_base(classes: usize) -> Self {
        Self::unet("canonical-base", &Widths::CANONICAL, classes, None)
    }

    pub fn canonical_atlas_aware(classes: usize, areas: usize) -> Self {
        Self::unet("canonical-atlas-aware", &Widths::CANONICAL, classes, Some(areas))
    }

    pub fn desk_base(classes: usize) -> Self {
        Self::unet("desk-base", &Widths::DESK, classes, None)
    }

    pub fn desk_atlas_aware(classes: usize, areas: usize) -> Self {
        Self::unet("desk-atlas-aware", &Widths::DESK, classes, Some(areas))
    }

    pub fn has_atlas(&self) -> bool {
        self.atlas_path.is_some()
    }

    /// Input side lengths must be multiples of this (stride-4 input block
    /// times 2 per pool).
    pub fn size_multiple(&self) -> usize {
        let pools = self.image_path.iter().filter(|b| b.pool).count();
        self.image_path.first().map(|b| b.stride()).unwrap_or(1) << pools
    }

    /// Checks every structural invariant and returns the per-block channel
    /// plan used by model construction.
    pub fn plan(&self) -> Result<Plan> {
        plan(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }
}

fn arch_err(msg: impl Into<String>) -> Error {
    Error::Architecture(msg.into())
}

/// One convolution in the instantiated network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    pub name: String,
    pub in_channels: usize,
    pub spec: ConvSpec,
    /// Followed by batchnorm + ReLU (every conv except the classifier).
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpsamplePlan {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub path: PathKind,
    pub index: usize,
    pub role: BlockRole,
    pub upsample: Option<UpsamplePlan>,
    pub skips: Vec<SkipRef>,
    /// Concatenate the atlas path's terminal activations before this block.
    pub joins_atlas: bool,
    pub convs: Vec<ConvPlan>,
    pub pool: bool,
    /// Scale (relative to the image grid) of this block's pre-pool output.
    pub scale: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub atlas: Vec<BlockPlan>,
    pub image: Vec<BlockPlan>,
}

impl Plan {
    pub fn block(&self, r: SkipRef) -> &BlockPlan {
        match r.path {
            PathKind::Image => &self.image[r.block],
            PathKind::Atlas => &self.atlas[r.block],
        }
    }
}

fn block_name(path: PathKind, index: usize) -> String {
    match path {
        PathKind::Image => format!("img.b{}", index + 1),
        PathKind::Atlas => format!("atl.b{}", index + 1),
    }
}

fn plan_convs(prefix: &str, mut in_ch: usize, convs: &[ConvSpec], classifier_last: bool) -> Result<(Vec<ConvPlan>, usize)> {
    let mut out = Vec::new();
    for (i, c) in convs.iter().enumerate() {
        if c.kernel == 0 || c.kernel % 2 == 0 {
            return Err(arch_err(format!("{prefix}: kernel {} is not odd (same padding needs odd kernels)", c.kernel)));
        }
        if c.stride == 0 || c.out_channels == 0 {
            return Err(arch_err(format!("{prefix}: zero stride or channel count")));
        }
        let last = i + 1 == convs.len();
        out.push(ConvPlan {
            name: format!("{prefix}.conv{i}"),
            in_channels: in_ch,
            spec: *c,
            normalized: !(classifier_last && last),
        });
        in_ch = c.out_channels;
    }
    Ok((out, in_ch))
}

fn plan_atlas(cfg: &ArchitectureConfig, blocks: &[BlockSpec]) -> Result<(Vec<BlockPlan>, usize, usize)> {
    if cfg.atlas_channels == 0 {
        return Err(arch_err("atlas path present but atlas_channels is 0"));
    }
    let mut plans = Vec::new();
    let mut scale = ATLAS_SCALE;
    let mut ch = cfg.atlas_channels;
    for (i, b) in blocks.iter().enumerate() {
        let name = block_name(PathKind::Atlas, i);
        let expected = if i == 0 {
            BlockRole::AtlasInput
        } else {
            BlockRole::Contracting
        };
        if b.role != expected {
            return Err(arch_err(format!("{name}: expected role {expected:?}, got {:?}", b.role)));
        }
        if b.upsample.is_some() || !b.skips.is_empty() {
            return Err(arch_err(format!("{name}: atlas blocks cannot upsample or take skips")));
        }
        if b.stride() != 1 {
            return Err(arch_err(format!("{name}: atlas convolutions must have stride 1")));
        }
        if i == 0 && (b.pool || b.convs.len() != 1) {
            return Err(arch_err(format!("{name}: atlas input block is a single convolution without pooling")));
        }
        if i > 0 && !b.pool {
            return Err(arch_err(format!("{name}: contracting blocks must end in a pool")));
        }
        let (convs, out) = plan_convs(&name, ch, &b.convs, false)?;
        plans.push(BlockPlan {
            path: PathKind::Atlas,
            index: i,
            role: b.role,
            upsample: None,
            skips: Vec::new(),
            joins_atlas: false,
            convs,
            pool: b.pool,
            scale,
            out_channels: out,
        });
        ch = out;
        if b.pool {
            scale *= 2;
        }
    }
    if plans.is_empty() {
        return Err(arch_err("atlas path is empty"));
    }
    Ok((plans, ch, scale))
}

fn plan(cfg: &ArchitectureConfig) -> Result<Plan> {
    if cfg.classes < 2 {
        return Err(arch_err("at least two classes are required"));
    }
    if cfg.input_channels == 0 {
        return Err(arch_err("input_channels must be positive"));
    }
    let (atlas, atlas_terminal) = match &cfg.atlas_path {
        Some(blocks) => {
            let (p, ch, scale) = plan_atlas(cfg, blocks)?;
            (p, Some((ch, scale)))
        }
        None => (Vec::new(), None),
    };
    let blocks = &cfg.image_path;
    if blocks.len() < 2 {
        return Err(arch_err("image path needs at least an input and an output block"));
    }
    // role order: input, contracting*, bottom?, expansive*, output
    let rank = |r: BlockRole| match r {
        BlockRole::Input => 0,
        BlockRole::Contracting => 1,
        BlockRole::Bottom => 2,
        BlockRole::Expansive => 3,
        BlockRole::Output => 4,
        BlockRole::AtlasInput => 5,
    };
    if blocks[0].role != BlockRole::Input {
        return Err(arch_err("first image block must have role input"));
    }
    if blocks[blocks.len() - 1].role != BlockRole::Output {
        return Err(arch_err("last image block must have role output"));
    }
    for (i, w) in blocks.windows(2).enumerate() {
        let (a, b) = (rank(w[0].role), rank(w[1].role));
        if b < a || (b == a && a != 1 && a != 3) || b == 5 {
            return Err(arch_err(format!(
                "{}: role {:?} cannot follow {:?}",
                block_name(PathKind::Image, i + 1),
                w[1].role,
                w[0].role
            )));
        }
    }
    let bottom = blocks.iter().position(|b| b.role == BlockRole::Bottom);
    if atlas_terminal.is_some() && bottom.is_none() {
        return Err(arch_err("atlas-aware configs need a bottom block to join the paths"));
    }

    let mut plans: Vec<BlockPlan> = Vec::new();
    let mut scale = 1usize;
    let mut ch = cfg.input_channels;
    let mut joined = false;
    for (i, b) in blocks.iter().enumerate() {
        let name = block_name(PathKind::Image, i);
        match b.role {
            BlockRole::Input => {
                if b.pool || b.upsample.is_some() || b.stride() != 4 {
                    return Err(arch_err(format!(
                        "{name}: input block must have net stride 4 and no pool/upsample (stride {})",
                        b.stride()
                    )));
                }
            }
            BlockRole::Contracting => {
                if !b.pool || b.upsample.is_some() || b.stride() != 1 {
                    return Err(arch_err(format!("{name}: contracting blocks are stride-1 convs ending in one pool")));
                }
            }
            BlockRole::Bottom | BlockRole::Output => {
                if b.pool || b.upsample.is_some() || b.stride() != 1 {
                    return Err(arch_err(format!("{name}: {:?} blocks have stride-1 convs only", b.role)));
                }
            }
            BlockRole::Expansive => {
                if b.upsample.is_none() || b.pool || b.stride() != 1 {
                    return Err(arch_err(format!("{name}: expansive blocks start with one upsample")));
                }
            }
            BlockRole::AtlasInput => unreachable!(),
        }
        if b.convs.is_empty() {
            return Err(arch_err(format!("{name}: block has no convolutions")));
        }
        if !b.skips.is_empty() && b.role != BlockRole::Expansive {
            return Err(arch_err(format!("{name}: only expansive blocks take skip connections")));
        }

        let mut upsample = None;
        let mut joins_atlas = false;
        if let Some(out) = b.upsample {
            if out == 0 {
                return Err(arch_err(format!("{name}: upsample with zero channels")));
            }
            if let (Some((ach, ascale)), false) = (atlas_terminal, joined) {
                if ascale != scale {
                    return Err(arch_err(format!(
                        "{name}: atlas terminal scale {ascale} does not match bottom scale {scale}"
                    )));
                }
                joins_atlas = true;
                joined = true;
                ch += ach;
            }
            upsample = Some(UpsamplePlan {
                name: format!("{name}.up"),
                in_channels: ch,
                out_channels: out,
            });
            ch = out;
            if scale % 2 != 0 {
                return Err(arch_err(format!("{name}: upsampling below the input resolution")));
            }
            scale /= 2;
        }
        for s in &b.skips {
            let src = match s.path {
                PathKind::Image => plans.get(s.block),
                PathKind::Atlas => atlas.get(s.block),
            };
            let Some(src) = src else {
                return Err(arch_err(format!("{name}: skip source {:?} block {} does not exist", s.path, s.block + 1)));
            };
            if s.path == PathKind::Atlas && atlas_terminal.is_none() {
                return Err(arch_err(format!("{name}: atlas skip without an atlas path")));
            }
            if src.scale != scale {
                return Err(arch_err(format!(
                    "{name}: skip from {} at scale {} does not match scale {}",
                    block_name(s.path, s.block),
                    src.scale,
                    scale
                )));
            }
            ch += src.out_channels;
        }
        let is_output = b.role == BlockRole::Output;
        let (convs, out) = plan_convs(&name, ch, &b.convs, is_output)?;
        if b.role == BlockRole::Input {
            scale = 4;
        }
        if is_output {
            let last = convs.last().expect("non-empty");
            if last.spec.kernel != 1 || last.spec.out_channels != cfg.classes {
                return Err(arch_err(format!(
                    "{name}: classifier must be a 1x1 conv with {} outputs",
                    cfg.classes
                )));
            }
        }
        plans.push(BlockPlan {
            path: PathKind::Image,
            index: i,
            role: b.role,
            upsample,
            skips: b.skips.clone(),
            joins_atlas,
            convs,
            pool: b.pool,
            scale,
            out_channels: out,
        });
        ch = out;
        if b.pool {
            scale *= 2;
        }
        if Some(i) == bottom && atlas_terminal.is_some() && !blocks[i + 1..].iter().any(|b| b.upsample.is_some()) {
            return Err(arch_err("atlas-aware configs need an expansive block after the bottom"));
        }
    }
    if scale != OUTPUT_STRIDE {
        return Err(arch_err(format!("composed output stride is {scale}, must be {OUTPUT_STRIDE}")));
    }
    Ok(Plan { atlas, image: plans })
}

/// Receptive field (px, one side) and output stride along the image path.
pub fn receptive_field(cfg: &ArchitectureConfig) -> Result<(usize, usize)> {
    let plan = cfg.plan()?;
    let (mut rf, mut jump) = (1usize, 1usize);
    for b in &plan.image {
        if b.upsample.is_some() {
            jump /= 2;
        }
        for c in &b.convs {
            rf += (c.spec.kernel - 1) * jump;
            jump *= c.spec.stride;
        }
        if b.pool {
            rf += jump;
            jump *= 2;
        }
    }
    Ok((rf, jump))
}

/// Number of learnable scalars: conv and transposed-conv weights and biases
/// plus batchnorm scale and shift.
pub fn count_parameters(cfg: &ArchitectureConfig) -> Result<usize> {
    let plan = cfg.plan()?;
    let mut total = 0;
    for b in plan.atlas.iter().chain(&plan.image) {
        if let Some(u) = &b.upsample {
            total += u.in_channels * u.out_channels * 4 + u.out_channels;
        }
        for c in &b.convs {
            let k = c.spec.kernel;
            total += c.in_channels * c.spec.out_channels * k * k + c.spec.out_channels;
            if c.normalized {
                total += 2 * c.spec.out_channels;
            }
        }
    }
    Ok(total)
}
