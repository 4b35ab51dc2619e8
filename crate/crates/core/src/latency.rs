//! Edge-vs-cloud latency composition for clip-processing pipelines.
//!
//! A pipeline is an ordered list of stages, each priced by a [`StageProfile`]
//! (per-frame, per-window, per-token or fixed cost). Cloud runs also pay for
//! network transfers. Stages that each decode the same source video can have
//! their repeated fixed overhead removed by a [`SharedOverheadPolicy`].
//!
//! Measured benchmark rows live in a [`ProfileBook`]; [`bundled`] ships the
//! reference rows, the two reference pipelines and a golden table.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gait::WindowSpec;

/// Fixed per-transfer cost reproducing both reference transfer times.
pub const DEFAULT_LINK_OVERHEAD_S: f64 = 1.25;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown stage {name:?} in {placement} profiles")]
    UnknownStage { name: String, placement: Placement },
    #[error("observed {observed_s} s is below the per-frame compute total {compute_s} s")]
    Inconsistent { observed_s: f64, compute_s: f64 },
    #[error("shared-overhead correction {correction_s} s exceeds the component sum {sum_s} s")]
    NegativeTotal { sum_s: f64, correction_s: f64 },
    #[error("totals must be positive (device {device_s} s, cloud {cloud_s} s)")]
    NonPositive { device_s: f64, cloud_s: f64 },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Device,
    Cloud,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Device => "device",
            Placement::Cloud => "cloud",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PerFrame,
    PerWindow,
    PerToken,
    Fixed,
}

/// Cost model of one stage on one placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageProfile {
    pub name: String,
    pub kind: StageKind,
    #[serde(default)]
    pub per_frame_ms: f64,
    #[serde(default)]
    pub per_window_ms: f64,
    #[serde(default)]
    pub prefill_ms_per_token: f64,
    #[serde(default)]
    pub decode_ms_per_token: f64,
    #[serde(default)]
    pub fixed_overhead_s: f64,
    /// Whether the stage decodes the source video itself.
    #[serde(default)]
    pub shares_decoded_input: bool,
}

impl StageProfile {
    pub fn fixed(name: &str, seconds: f64) -> Self {
        Self {
            name: name.into(),
            kind: StageKind::Fixed,
            per_frame_ms: 0.0,
            per_window_ms: 0.0,
            prefill_ms_per_token: 0.0,
            decode_ms_per_token: 0.0,
            fixed_overhead_s: seconds,
            shares_decoded_input: false,
        }
    }

    pub fn per_frame(name: &str, ms: f64, overhead_s: f64) -> Self {
        Self {
            kind: StageKind::PerFrame,
            per_frame_ms: ms,
            ..Self::fixed(name, overhead_s)
        }
    }

    pub fn per_window(name: &str, ms: f64, overhead_s: f64) -> Self {
        Self {
            kind: StageKind::PerWindow,
            per_window_ms: ms,
            ..Self::fixed(name, overhead_s)
        }
    }

    pub fn per_token(name: &str, prefill_ms: f64, decode_ms: f64, overhead_s: f64) -> Self {
        Self {
            kind: StageKind::PerToken,
            prefill_ms_per_token: prefill_ms,
            decode_ms_per_token: decode_ms,
            ..Self::fixed(name, overhead_s)
        }
    }

    pub fn sharing(mut self) -> Self {
        self.shares_decoded_input = true;
        self
    }

    /// Fields used by the declared kind must be finite and non-negative;
    /// the others must be zero.
    pub fn validate(&self) -> Result<(), LatencyError> {
        let fields = [
            (
                "per_frame_ms",
                self.per_frame_ms,
                self.kind == StageKind::PerFrame,
            ),
            (
                "per_window_ms",
                self.per_window_ms,
                self.kind == StageKind::PerWindow,
            ),
            (
                "prefill_ms_per_token",
                self.prefill_ms_per_token,
                self.kind == StageKind::PerToken,
            ),
            (
                "decode_ms_per_token",
                self.decode_ms_per_token,
                self.kind == StageKind::PerToken,
            ),
            ("fixed_overhead_s", self.fixed_overhead_s, true),
        ];
        for (field, value, used) in fields {
            if used && !(value.is_finite() && value >= 0.0) {
                return Err(LatencyError::Config(format!(
                    "stage {:?}: {field} = {value} must be finite and non-negative",
                    self.name
                )));
            }
            if !used && value != 0.0 {
                return Err(LatencyError::Config(format!(
                    "stage {:?}: {field} is set but unused by kind {:?}",
                    self.name, self.kind
                )));
            }
        }
        Ok(())
    }

    /// Decode over prefill cost per token, for token-priced stages.
    pub fn decode_prefill_ratio(&self) -> Option<f64> {
        (self.kind == StageKind::PerToken && self.prefill_ms_per_token > 0.0)
            .then(|| self.decode_ms_per_token / self.prefill_ms_per_token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub duration_s: f64,
    pub fps: f64,
    pub n_frames: usize,
}

impl ClipSpec {
    pub fn new(duration_s: f64, fps: f64) -> Self {
        Self {
            duration_s,
            fps,
            n_frames: (duration_s * fps).round().max(0.0) as usize,
        }
    }

    pub fn reference() -> Self {
        Self::new(10.0, 60.0)
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        let ok = self.duration_s.is_finite()
            && self.duration_s >= 0.0
            && self.fps.is_finite()
            && self.fps > 0.0
            && (self.n_frames as f64 - self.duration_s * self.fps).abs() < 1e-6;
        if ok {
            Ok(())
        } else {
            Err(LatencyError::Config(format!(
                "clip {}s at {} fps does not have {} frames",
                self.duration_s, self.fps, self.n_frames
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenCounts {
    #[serde(rename = "in")]
    pub input: u32,
    #[serde(rename = "out")]
    pub output: u32,
}

impl TokenCounts {
    /// A short clinical summary: about 750 tokens in, 300 out.
    pub fn reference() -> Self {
        Self {
            input: 750,
            output: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkLink {
    #[serde(default)]
    pub name: String,
    pub bandwidth_mbps: f64,
    #[serde(default = "default_link_overhead")]
    pub fixed_overhead_s: f64,
}

fn default_link_overhead() -> f64 {
    DEFAULT_LINK_OVERHEAD_S
}

impl NetworkLink {
    pub fn new(name: &str, bandwidth_mbps: f64) -> Self {
        Self {
            name: name.into(),
            bandwidth_mbps,
            fixed_overhead_s: DEFAULT_LINK_OVERHEAD_S,
        }
    }

    /// 15 Mbps mobile uplink.
    pub fn global_average() -> Self {
        Self::new("global_avg", 15.0)
    }

    /// 300 Mbps Wi-Fi.
    pub fn fast() -> Self {
        Self::new("fast", 300.0)
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        if !(self.bandwidth_mbps.is_finite() && self.bandwidth_mbps > 0.0) {
            return Err(LatencyError::Config(format!(
                "link {:?}: bandwidth {} Mbps must be positive",
                self.name, self.bandwidth_mbps
            )));
        }
        if !(self.fixed_overhead_s.is_finite() && self.fixed_overhead_s >= 0.0) {
            return Err(LatencyError::Config(format!(
                "link {:?}: overhead {} s must be non-negative",
                self.name, self.fixed_overhead_s
            )));
        }
        Ok(())
    }
}

/// Seconds to move `bytes` over `link`. Empty payloads are free.
pub fn transfer_time(bytes: f64, link: &NetworkLink) -> f64 {
    if bytes <= 0.0 {
        return 0.0;
    }
    bytes * 8.0 / (link.bandwidth_mbps * 1e6) + link.fixed_overhead_s
}

pub fn stage_time(
    stage: &StageProfile,
    clip: &ClipSpec,
    windows: &WindowSpec,
    tokens: &TokenCounts,
) -> Result<f64, LatencyError> {
    stage.validate()?;
    let variable_ms = match stage.kind {
        StageKind::PerFrame => clip.n_frames as f64 * stage.per_frame_ms,
        StageKind::PerWindow => windows.count(clip.n_frames) as f64 * stage.per_window_ms,
        StageKind::PerToken => {
            tokens.input as f64 * stage.prefill_ms_per_token
                + tokens.output as f64 * stage.decode_ms_per_token
        }
        StageKind::Fixed => 0.0,
    };
    Ok(variable_ms / 1000.0 + stage.fixed_overhead_s)
}

/// Fixed overhead that makes a per-frame stage reproduce an observed
/// end-to-end time.
pub fn calibrate_overhead(
    observed_e2e_s: f64,
    per_frame_ms: f64,
    n_frames: usize,
) -> Result<f64, LatencyError> {
    let compute_s = n_frames as f64 * per_frame_ms / 1000.0;
    let overhead = observed_e2e_s - compute_s;
    // Allow for decimal round-off in exact calibrations.
    if overhead < -1e-9 * observed_e2e_s.abs().max(1.0) || !overhead.is_finite() {
        return Err(LatencyError::Inconsistent {
            observed_s: observed_e2e_s,
            compute_s,
        });
    }
    Ok(overhead.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedOverheadPolicy {
    None,
    SubtractMin,
    SubtractMax,
}

impl SharedOverheadPolicy {
    pub fn default_for(placement: Placement) -> Self {
        match placement {
            Placement::Device => SharedOverheadPolicy::SubtractMax,
            Placement::Cloud => SharedOverheadPolicy::SubtractMin,
        }
    }

    /// Removes `k − 1` copies of the min or max overhead among `k` stages.
    pub fn correction(self, shared_overheads: &[f64]) -> f64 {
        let k = shared_overheads.len();
        if k < 2 {
            return 0.0;
        }
        let pick = match self {
            SharedOverheadPolicy::None => return 0.0,
            SharedOverheadPolicy::SubtractMin => shared_overheads
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
            SharedOverheadPolicy::SubtractMax => shared_overheads
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        };
        (k - 1) as f64 * pick
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub name: String,
    pub placement: Placement,
    pub stages: Vec<String>,
    #[serde(default)]
    pub uploads: Vec<f64>,
    #[serde(default)]
    pub downloads: Vec<f64>,
    pub clip: ClipSpec,
    #[serde(default)]
    pub window_spec: WindowSpec,
    #[serde(default)]
    pub token_counts: TokenCounts,
    pub shared_overhead_policy: SharedOverheadPolicy,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<(), LatencyError> {
        self.clip.validate()?;
        if self.placement == Placement::Device
            && !(self.uploads.is_empty() && self.downloads.is_empty())
        {
            return Err(LatencyError::Config(format!(
                "pipeline {:?}: device placement cannot have transfers",
                self.name
            )));
        }
        if let Some(b) = self
            .uploads
            .iter()
            .chain(&self.downloads)
            .find(|b| !(b.is_finite() && **b >= 0.0))
        {
            return Err(LatencyError::Config(format!(
                "pipeline {:?}: payload {b} bytes",
                self.name
            )));
        }
        Ok(())
    }
}

/// Resolved stage profiles for one placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSet {
    pub placement: Placement,
    #[serde(default)]
    pub batch_size: Option<u32>,
    pub stages: Vec<StageProfile>,
}

impl ProfileSet {
    pub fn get(&self, name: &str) -> Result<&StageProfile, LatencyError> {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| LatencyError::UnknownStage {
                name: name.into(),
                placement: self.placement,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub name: String,
    pub seconds: f64,
    pub shares_decoded_input: bool,
    pub fixed_overhead_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCost {
    pub direction: Direction,
    pub bytes: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub name: String,
    pub placement: Placement,
    pub link: Option<NetworkLink>,
    pub stages: Vec<StageCost>,
    pub transfers: Vec<TransferCost>,
    pub shared_overhead_policy: SharedOverheadPolicy,
    pub correction_s: f64,
    pub total_s: f64,
    /// This total over the compared report's total, when set.
    pub ratio: Option<f64>,
}

impl LatencyReport {
    pub fn stage_s(&self) -> f64 {
        self.stages.iter().fold(0.0, |acc, s| acc + s.seconds)
    }

    pub fn transfer_s(&self) -> f64 {
        self.transfers.iter().fold(0.0, |acc, t| acc + t.seconds)
    }

    /// Sets `ratio` to this total over `device`'s.
    pub fn compared_to(mut self, device: &LatencyReport) -> Result<Self, LatencyError> {
        self.ratio = Some(compare(device, &self)?);
        Ok(self)
    }
}

/// Total time of a pipeline. `link` is required for cloud pipelines with
/// transfers and ignored on device.
pub fn pipeline_time(
    spec: &PipelineSpec,
    profiles: &ProfileSet,
    link: Option<&NetworkLink>,
) -> Result<LatencyReport, LatencyError> {
    spec.validate()?;
    if profiles.placement != spec.placement {
        return Err(LatencyError::Config(format!(
            "pipeline {:?} runs on {} but the profiles are for {}",
            spec.name, spec.placement, profiles.placement
        )));
    }
    let mut stages = Vec::with_capacity(spec.stages.len());
    for name in &spec.stages {
        let p = profiles.get(name)?;
        stages.push(StageCost {
            name: name.clone(),
            seconds: stage_time(p, &spec.clip, &spec.window_spec, &spec.token_counts)?,
            shares_decoded_input: p.shares_decoded_input,
            fixed_overhead_s: p.fixed_overhead_s,
        });
    }

    let link = match spec.placement {
        Placement::Device => None,
        Placement::Cloud => {
            let needs_link = !(spec.uploads.is_empty() && spec.downloads.is_empty());
            match link {
                Some(l) => {
                    l.validate()?;
                    Some(l.clone())
                }
                None if needs_link => {
                    return Err(LatencyError::Config(format!(
                        "cloud pipeline {:?} has transfers but no network link",
                        spec.name
                    )))
                }
                None => None,
            }
        }
    };
    let mut transfers = Vec::new();
    if let Some(l) = &link {
        for (direction, list) in [
            (Direction::Upload, &spec.uploads),
            (Direction::Download, &spec.downloads),
        ] {
            transfers.extend(list.iter().map(|&bytes| TransferCost {
                direction,
                bytes,
                seconds: transfer_time(bytes, l),
            }));
        }
    }

    let shared: Vec<f64> = stages
        .iter()
        .filter(|s| s.shares_decoded_input)
        .map(|s| s.fixed_overhead_s)
        .collect();
    let correction_s = spec.shared_overhead_policy.correction(&shared);
    let sum_s = stages
        .iter()
        .map(|s| s.seconds)
        .chain(transfers.iter().map(|t| t.seconds))
        .fold(0.0, |acc, x| acc + x);
    let total_s = sum_s - correction_s;
    if total_s < 0.0 {
        return Err(LatencyError::NegativeTotal {
            sum_s,
            correction_s,
        });
    }
    Ok(LatencyReport {
        name: spec.name.clone(),
        placement: spec.placement,
        link,
        stages,
        transfers,
        shared_overhead_policy: spec.shared_overhead_policy,
        correction_s,
        total_s,
        ratio: None,
    })
}

/// Cloud total over device total.
pub fn compare(device: &LatencyReport, cloud: &LatencyReport) -> Result<f64, LatencyError> {
    if !(device.total_s > 0.0 && cloud.total_s > 0.0) {
        return Err(LatencyError::NonPositive {
            device_s: device.total_s,
            cloud_s: cloud.total_s,
        });
    }
    Ok(cloud.total_s / device.total_s)
}

/// Shared assumptions behind a set of measured rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub clip: ClipSpec,
    pub window_spec: WindowSpec,
    pub tokens: TokenCounts,
    pub video_bytes: f64,
}

/// Values as printed in a benchmark table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableCells {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms_per_frame: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_ms_per_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_ms_per_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_to_end_s: Option<f64>,
}

/// One measured row. Model parameters not given explicitly are derived
/// from the table cells by [`MeasuredRow::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredRow {
    pub name: String,
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<String>,
    pub kind: StageKind,
    #[serde(default)]
    pub table: TableCells,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_frame_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_overhead_s: Option<f64>,
    #[serde(default)]
    pub shares_decoded_input: bool,
}

impl MeasuredRow {
    /// - per-frame: overhead calibrated against the end-to-end cell
    /// - per-window: the end-to-end cell spread over the reference windows
    /// - per-token: table rates, no overhead
    /// - fixed: the end-to-end cell
    pub fn resolve(&self, reference: &Reference) -> Result<StageProfile, LatencyError> {
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| LatencyError::Config(format!("row {:?} lacks {what}", self.name)))
        };
        let profile = match self.kind {
            StageKind::PerFrame => {
                let ms = match self.per_frame_ms {
                    Some(ms) => ms,
                    None => need(self.table.ms_per_frame, "ms_per_frame")?,
                };
                let overhead = match self.fixed_overhead_s {
                    Some(o) => o,
                    None => calibrate_overhead(
                        need(self.table.end_to_end_s, "end_to_end_s")?,
                        ms,
                        reference.clip.n_frames,
                    )?,
                };
                StageProfile::per_frame(&self.name, ms, overhead)
            }
            StageKind::PerWindow => {
                let n = reference.window_spec.count(reference.clip.n_frames);
                if n == 0 {
                    return Err(LatencyError::Config("reference clip has no windows".into()));
                }
                let e2e = need(self.table.end_to_end_s, "end_to_end_s")?;
                StageProfile::per_window(
                    &self.name,
                    e2e * 1000.0 / n as f64,
                    self.fixed_overhead_s.unwrap_or(0.0),
                )
            }
            StageKind::PerToken => StageProfile::per_token(
                &self.name,
                need(self.table.prefill_ms_per_token, "prefill_ms_per_token")?,
                need(self.table.decode_ms_per_token, "decode_ms_per_token")?,
                self.fixed_overhead_s.unwrap_or(0.0),
            ),
            StageKind::Fixed => {
                let s = match self.fixed_overhead_s {
                    Some(s) => s,
                    None => need(self.table.end_to_end_s, "end_to_end_s")?,
                };
                StageProfile::fixed(&self.name, s)
            }
        };
        let profile = StageProfile {
            shares_decoded_input: self.shares_decoded_input,
            ..profile
        };
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredSet {
    #[serde(default)]
    pub batch_size: Option<u32>,
    pub rows: Vec<MeasuredRow>,
}

/// Measured rows for both placements plus the reference network links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileBook {
    pub reference: Reference,
    pub links: Vec<NetworkLink>,
    pub device: MeasuredSet,
    pub cloud: MeasuredSet,
}

impl ProfileBook {
    pub fn from_json(text: &str) -> Result<Self, LatencyError> {
        let book: Self = serde_json::from_str(text)?;
        book.reference.clip.validate()?;
        for l in &book.links {
            l.validate()?;
        }
        book.resolve(Placement::Device)?;
        book.resolve(Placement::Cloud)?;
        Ok(book)
    }

    pub fn measured(&self, placement: Placement) -> &MeasuredSet {
        match placement {
            Placement::Device => &self.device,
            Placement::Cloud => &self.cloud,
        }
    }

    pub fn row(&self, placement: Placement, name: &str) -> Option<&MeasuredRow> {
        self.measured(placement)
            .rows
            .iter()
            .find(|r| r.name == name)
    }

    pub fn resolve(&self, placement: Placement) -> Result<ProfileSet, LatencyError> {
        let set = self.measured(placement);
        let stages = set
            .rows
            .iter()
            .map(|r| r.resolve(&self.reference))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ProfileSet {
            placement,
            batch_size: set.batch_size,
            stages,
        })
    }

    pub fn link(&self, name: &str) -> Result<&NetworkLink, LatencyError> {
        self.links
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| LatencyError::Config(format!("unknown network link {name:?}")))
    }
}

/// A placement-independent pipeline; [`Scenario::spec`] builds the
/// per-placement [`PipelineSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub label: String,
    pub stages: Vec<String>,
    /// Upload payloads in bytes; defaults to one source video.
    #[serde(default)]
    pub uploads: Option<Vec<f64>>,
    /// Result payloads in bytes; defaults to one source-sized video.
    #[serde(default)]
    pub downloads: Option<Vec<f64>>,
    #[serde(default)]
    pub device_policy: Option<SharedOverheadPolicy>,
    #[serde(default)]
    pub cloud_policy: Option<SharedOverheadPolicy>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, LatencyError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn spec(&self, placement: Placement, reference: &Reference) -> PipelineSpec {
        let video = vec![reference.video_bytes];
        let (uploads, downloads, policy) = match placement {
            Placement::Device => (vec![], vec![], self.device_policy),
            Placement::Cloud => (
                self.uploads.clone().unwrap_or_else(|| video.clone()),
                self.downloads.clone().unwrap_or(video),
                self.cloud_policy,
            ),
        };
        PipelineSpec {
            name: self.name.clone(),
            placement,
            stages: self.stages.clone(),
            uploads,
            downloads,
            clip: reference.clip,
            window_spec: reference.window_spec,
            token_counts: reference.tokens,
            shared_overhead_policy: policy
                .unwrap_or_else(|| SharedOverheadPolicy::default_for(placement)),
        }
    }

    /// Device report plus one cloud report per link, each carrying its
    /// ratio to the device total.
    pub fn run(
        &self,
        book: &ProfileBook,
        links: &[NetworkLink],
    ) -> Result<(LatencyReport, Vec<LatencyReport>), LatencyError> {
        let device = pipeline_time(
            &self.spec(Placement::Device, &book.reference),
            &book.resolve(Placement::Device)?,
            None,
        )?;
        let cloud_profiles = book.resolve(Placement::Cloud)?;
        let cloud_spec = self.spec(Placement::Cloud, &book.reference);
        let clouds = links
            .iter()
            .map(|l| pipeline_time(&cloud_spec, &cloud_profiles, Some(l))?.compared_to(&device))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((device, clouds))
    }
}

/// Accepted deviation of a simulated value from a published one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tolerance {
    Abs(f64),
    Rel(f64),
}

impl Tolerance {
    pub fn admits(self, expected: f64, actual: f64) -> bool {
        let d = (actual - expected).abs();
        match self {
            Tolerance::Abs(t) => d <= t,
            Tolerance::Rel(t) => d <= t * expected.abs(),
        }
    }
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tolerance::Abs(t) => write!(f, "±{t}"),
            Tolerance::Rel(t) => write!(f, "±{}%", t * 100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenTransfer {
    pub link: String,
    pub bytes: f64,
    pub published_s: f64,
    pub tolerance: Tolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenStage {
    pub placement: Placement,
    pub stage: String,
    pub published_s: f64,
    pub tolerance: Tolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenPipeline {
    pub scenario: String,
    pub placement: Placement,
    #[serde(default)]
    pub link: Option<String>,
    pub published_s: f64,
    pub tolerance: Tolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenGain {
    pub scenario: String,
    pub link: String,
    pub published: f64,
    pub tolerance: Tolerance,
}

/// Published cells with per-cell tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Golden {
    pub transfers: Vec<GoldenTransfer>,
    pub stages: Vec<GoldenStage>,
    pub pipelines: Vec<GoldenPipeline>,
    pub gains: Vec<GoldenGain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenCell {
    pub label: String,
    pub published: f64,
    pub simulated: f64,
    pub tolerance: Tolerance,
    pub deviation_pct: f64,
    pub pass: bool,
}

impl GoldenCell {
    fn new(label: String, published: f64, simulated: f64, tolerance: Tolerance) -> Self {
        Self {
            label,
            published,
            simulated,
            tolerance,
            deviation_pct: (simulated - published) / published * 100.0,
            pass: tolerance.admits(published, simulated),
        }
    }
}

impl Golden {
    pub fn from_json(text: &str) -> Result<Self, LatencyError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn check(
        &self,
        book: &ProfileBook,
        scenarios: &[Scenario],
    ) -> Result<Vec<GoldenCell>, LatencyError> {
        let reference = &book.reference;
        let mut cells = Vec::new();
        for t in &self.transfers {
            cells.push(GoldenCell::new(
                format!("transfer {} bytes over {}", t.bytes, t.link),
                t.published_s,
                transfer_time(t.bytes, book.link(&t.link)?),
                t.tolerance,
            ));
        }
        let device = book.resolve(Placement::Device)?;
        let cloud = book.resolve(Placement::Cloud)?;
        let set = |p| match p {
            Placement::Device => &device,
            Placement::Cloud => &cloud,
        };
        for s in &self.stages {
            let profile = set(s.placement).get(&s.stage)?;
            let t = stage_time(
                profile,
                &reference.clip,
                &reference.window_spec,
                &reference.tokens,
            )?;
            cells.push(GoldenCell::new(
                format!("{} {}", s.placement, s.stage),
                s.published_s,
                t,
                s.tolerance,
            ));
        }
        let find = |name: &str| {
            scenarios
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| LatencyError::Config(format!("unknown scenario {name:?}")))
        };
        let run = |scenario: &Scenario, placement, link: Option<&str>| {
            let link = link.map(|l| book.link(l)).transpose()?;
            pipeline_time(&scenario.spec(placement, reference), set(placement), link)
        };
        for p in &self.pipelines {
            let report = run(find(&p.scenario)?, p.placement, p.link.as_deref())?;
            let at = p
                .link
                .as_deref()
                .map(|l| format!(" over {l}"))
                .unwrap_or_default();
            cells.push(GoldenCell::new(
                format!("{} pipeline on {}{at}", p.scenario, p.placement),
                p.published_s,
                report.total_s,
                p.tolerance,
            ));
        }
        for g in &self.gains {
            let scenario = find(&g.scenario)?;
            let d = run(scenario, Placement::Device, None)?;
            let c = run(scenario, Placement::Cloud, Some(&g.link))?;
            cells.push(GoldenCell::new(
                format!("{} gain over {}", g.scenario, g.link),
                g.published,
                compare(&d, &c)?,
                g.tolerance,
            ));
        }
        Ok(cells)
    }
}

/// Reference data compiled into the library.
pub mod bundled {
    use super::*;

    pub const PROFILES_JSON: &str = include_str!("../data/latency/profiles.json");
    pub const TIME_PRIORITY_JSON: &str = include_str!("../data/latency/time_priority.json");
    pub const QUALITY_PRIORITY_JSON: &str = include_str!("../data/latency/quality_priority.json");
    pub const TABLE2_JSON: &str = include_str!("../data/latency/table2.json");

    pub fn book() -> ProfileBook {
        ProfileBook::from_json(PROFILES_JSON).expect("bundled profiles are valid")
    }

    pub fn scenarios() -> Vec<Scenario> {
        [TIME_PRIORITY_JSON, QUALITY_PRIORITY_JSON]
            .iter()
            .map(|t| Scenario::from_json(t).expect("bundled scenario is valid"))
            .collect()
    }

    pub fn golden() -> Golden {
        Golden::from_json(TABLE2_JSON).expect("bundled golden table is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> Reference {
        Reference {
            clip: ClipSpec::reference(),
            window_spec: WindowSpec::default(),
            tokens: TokenCounts::reference(),
            video_bytes: 27.7e6,
        }
    }

    fn t(stage: &StageProfile) -> f64 {
        let r = reference();
        stage_time(stage, &r.clip, &r.window_spec, &r.tokens).unwrap()
    }

    #[test]
    fn transfer_examples() {
        let global = transfer_time(27.7e6, &NetworkLink::global_average());
        let fast = transfer_time(27.7e6, &NetworkLink::fast());
        assert!((global - (27.7 * 8.0 / 15.0 + 1.25)).abs() < 1e-12);
        assert!((global - 16.0).abs() < 0.05);
        assert!((fast - 2.0).abs() < 0.05);
        assert_eq!(transfer_time(0.0, &NetworkLink::fast()), 0.0);
    }

    #[test]
    fn stage_time_examples() {
        assert!((t(&StageProfile::per_token("e2b", 5.7, 83.0, 0.0)) - 29.175).abs() < 1e-9);
        assert!((t(&StageProfile::per_token("e4b", 17.0, 143.0, 0.0)) - 55.65).abs() < 1e-9);
        assert_eq!(t(&StageProfile::fixed("refine", 19.8)), 19.8);
        assert!((t(&StageProfile::per_frame("p", 8.0, 11.6)) - 16.4).abs() < 1e-12);
        assert!((t(&StageProfile::per_window("w", 1000.0, 0.5)) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn stage_kind_mismatch_is_a_config_error() {
        let mut s = StageProfile::fixed("x", 1.0);
        s.per_frame_ms = 3.0;
        assert!(matches!(s.validate(), Err(LatencyError::Config(m)) if m.contains("per_frame_ms")));
        let neg = StageProfile::per_token("x", -1.0, 2.0, 0.0);
        assert!(matches!(neg.validate(), Err(LatencyError::Config(_))));
    }

    #[test]
    fn calibration_examples() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        assert!(close(calibrate_overhead(16.4, 8.0, 600).unwrap(), 11.6));
        assert!(close(calibrate_overhead(25.2, 32.0, 600).unwrap(), 6.0));
        assert!((calibrate_overhead(30.5, 1.4, 600).unwrap() - 29.7).abs() < 0.05);
        match calibrate_overhead(15.9, 27.0, 600) {
            Err(LatencyError::Inconsistent {
                observed_s,
                compute_s,
            }) => {
                assert_eq!(observed_s, 15.9);
                assert!((compute_s - 16.2).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn correction_policies() {
        let o = [6.0, 3.7, 1.0];
        assert_eq!(SharedOverheadPolicy::SubtractMax.correction(&o), 12.0);
        assert_eq!(SharedOverheadPolicy::SubtractMin.correction(&o), 2.0);
        assert_eq!(SharedOverheadPolicy::None.correction(&o), 0.0);
        assert_eq!(SharedOverheadPolicy::SubtractMax.correction(&[6.0]), 0.0);
    }

    fn device_tp() -> (PipelineSpec, ProfileSet) {
        let profiles = ProfileSet {
            placement: Placement::Device,
            batch_size: None,
            stages: vec![
                StageProfile::per_frame("metrabs_l", 32.0, 6.0).sharing(),
                StageProfile::per_frame("vitpose_l", 57.0, 3.7).sharing(),
                StageProfile::fixed("refine", 19.8),
                StageProfile::per_window("agcn", 0.006 * 1000.0 / 9.0, 0.0),
            ],
        };
        let spec = PipelineSpec {
            name: "tp".into(),
            placement: Placement::Device,
            stages: vec![
                "metrabs_l".into(),
                "vitpose_l".into(),
                "refine".into(),
                "agcn".into(),
            ],
            uploads: vec![],
            downloads: vec![],
            clip: ClipSpec::reference(),
            window_spec: WindowSpec::default(),
            token_counts: TokenCounts::default(),
            shared_overhead_policy: SharedOverheadPolicy::SubtractMax,
        };
        (spec, profiles)
    }

    #[test]
    fn device_time_priority_example() {
        let (spec, profiles) = device_tp();
        let r = pipeline_time(&spec, &profiles, None).unwrap();
        assert!((r.total_s - 76.906).abs() < 1e-9);
        assert_eq!(r.correction_s, 6.0);
        assert!((r.stage_s() - r.correction_s - r.total_s).abs() < 1e-12);
    }

    #[test]
    fn pipeline_errors() {
        let (mut spec, profiles) = device_tp();
        spec.stages.push("nope".into());
        assert!(matches!(
            pipeline_time(&spec, &profiles, None),
            Err(LatencyError::UnknownStage { name, .. }) if name == "nope"
        ));
        let (mut spec, profiles) = device_tp();
        spec.uploads.push(1.0);
        assert!(matches!(
            pipeline_time(&spec, &profiles, None),
            Err(LatencyError::Config(_))
        ));
        let (mut spec, _) = device_tp();
        spec.placement = Placement::Cloud;
        let cloud = ProfileSet {
            placement: Placement::Cloud,
            ..device_tp().1
        };
        spec.uploads.push(1e6);
        assert!(
            matches!(pipeline_time(&spec, &cloud, None), Err(LatencyError::Config(m)) if m.contains("link"))
        );
        let (mut spec, profiles) = device_tp();
        spec.clip.n_frames = 599;
        assert!(matches!(
            pipeline_time(&spec, &profiles, None),
            Err(LatencyError::Config(_))
        ));
    }

    #[test]
    fn oversized_correction_is_rejected() {
        let profiles = ProfileSet {
            placement: Placement::Device,
            batch_size: None,
            stages: vec![
                StageProfile::fixed("a", 10.0).sharing(),
                StageProfile::fixed("b", 1.0).sharing(),
                StageProfile::fixed("c", 1.0).sharing(),
            ],
        };
        let spec = PipelineSpec {
            stages: vec!["a".into(), "b".into(), "c".into()],
            ..device_tp().0
        };
        assert!(matches!(
            pipeline_time(&spec, &profiles, None),
            Err(LatencyError::NegativeTotal { .. })
        ));
    }

    #[test]
    fn compare_examples() {
        let (spec, profiles) = device_tp();
        let mut a = pipeline_time(&spec, &profiles, None).unwrap();
        let b = a.clone();
        assert_eq!(compare(&a, &b).unwrap(), 1.0);
        a.total_s = 77.0;
        let mut c = b.clone();
        c.total_s = 94.0;
        assert!((compare(&a, &c).unwrap() - 1.22).abs() < 0.005);
        c.total_s = 66.0;
        assert!((compare(&a, &c).unwrap() - 0.86).abs() < 0.005);
        c.total_s = 0.0;
        assert!(compare(&a, &c).is_err());
    }

    #[test]
    fn bundled_data_loads() {
        let book = bundled::book();
        assert_eq!(book.reference, reference());
        let device = book.resolve(Placement::Device).unwrap();
        let cloud = book.resolve(Placement::Cloud).unwrap();
        assert_eq!(device.stages.len(), cloud.stages.len());
        assert_eq!((device.batch_size, cloud.batch_size), (Some(8), Some(64)));
        assert_eq!(bundled::scenarios().len(), 2);
        let g = bundled::golden();
        assert_eq!(g.pipelines.len(), 6);
    }

    #[test]
    fn per_frame_rows_reproduce_their_end_to_end_cells() {
        let book = bundled::book();
        for placement in [Placement::Device, Placement::Cloud] {
            let set = book.resolve(placement).unwrap();
            for row in &book.measured(placement).rows {
                let (Some(e2e), StageKind::PerFrame | StageKind::Fixed | StageKind::PerWindow) =
                    (row.table.end_to_end_s, row.kind)
                else {
                    continue;
                };
                let sim = t(set.get(&row.name).unwrap());
                assert!(
                    (sim - e2e).abs() < 1e-9,
                    "{placement} {}: {sim} vs {e2e}",
                    row.name
                );
            }
        }
    }

    #[test]
    fn report_json_round_trip() {
        let (spec, profiles) = device_tp();
        let r = pipeline_time(&spec, &profiles, None).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<LatencyReport>(&text).unwrap(), r);
        let spec_text = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            serde_json::from_str::<PipelineSpec>(&spec_text).unwrap(),
            spec
        );
    }
}
