use serde::{Deserialize, Serialize};

use crate::enrichment::EnrichmentParams;
use crate::error::{Error, Result};
use crate::gpm::GpmParams;
use crate::head::HeadParams;
use crate::nn::{Linear, Mlp, ParamDecl};

/// Architectural toggles for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Feed raw point features to the encoder (no contextual representation).
    pub disable_cr: bool,
    /// Concatenate point and context instead of gating them.
    pub concat_cr: bool,
    /// Replace every GPM layer with MLP + max pooling.
    pub disable_gpm: bool,
    /// Classify decoder features directly, without the attention head.
    pub disable_attention: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.disable_cr && self.concat_cr {
            return Err(Error::contract("disable_cr and concat_cr are mutually exclusive"));
        }
        Ok(())
    }
}

/// Named single-toggle variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutCr,
    WithoutGpm,
    WithoutAm,
    CrConcat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutCr,
        Variant::WithoutGpm,
        Variant::WithoutAm,
        Variant::CrConcat,
    ];

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::WithoutCr => a.disable_cr = true,
            Variant::WithoutGpm => a.disable_gpm = true,
            Variant::WithoutAm => a.disable_attention = true,
            Variant::CrConcat => a.concat_cr = true,
        }
        a
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutCr => "w/o CR",
            Variant::WithoutGpm => "w/o GPM",
            Variant::WithoutAm => "w/o AM",
            Variant::CrConcat => "CR with concatenation",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' ', '/'], "_");
        match norm.as_str() {
            "full" => Ok(Variant::Full),
            "without_cr" | "w_o_cr" | "no_cr" => Ok(Variant::WithoutCr),
            "without_gpm" | "w_o_gpm" | "no_gpm" => Ok(Variant::WithoutGpm),
            "without_am" | "w_o_am" | "no_am" => Ok(Variant::WithoutAm),
            "cr_concat" | "concat_cr" | "cr_with_concatenation" => Ok(Variant::CrConcat),
            _ => Err(Error::contract(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Per-point input features `C_f` (block-local xyz plus attributes).
    pub in_channels: usize,
    pub k: usize,
    pub enrich_radius: f64,
    pub layer_scales: Vec<usize>,
    pub layer_radii: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub channel_widths: Vec<usize>,
    pub gpm_enabled: Vec<bool>,
    pub mlp_depth: usize,
    pub stack_depth: usize,
    /// Output width of each decoder stage, coarsest first.
    pub decoder_widths: Vec<usize>,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            k: 3,
            enrich_radius: 0.06,
            layer_scales: vec![1024, 256, 64, 16],
            layer_radii: vec![0.1, 0.2, 0.4, 0.8],
            group_sizes: vec![32; 4],
            channel_widths: vec![64, 128, 256, 512],
            gpm_enabled: vec![true, true, false, false],
            mlp_depth: 2,
            stack_depth: 2,
            decoder_widths: vec![256, 256, 128, 128],
            num_classes: 13,
            leaky_slope: 0.2,
            ablation: Ablation::default(),
        }
    }
}

impl NetworkConfig {
    pub fn num_layers(&self) -> usize {
        self.layer_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_layers();
        if l == 0 {
            return Err(Error::contract("at least one encoder layer is required"));
        }
        let lens = [
            ("layer_radii", self.layer_radii.len()),
            ("group_sizes", self.group_sizes.len()),
            ("channel_widths", self.channel_widths.len()),
            ("gpm_enabled", self.gpm_enabled.len()),
            ("decoder_widths", self.decoder_widths.len()),
        ];
        for (name, n) in lens {
            if n != l {
                return Err(Error::contract(format!("{name} has {n} entries, expected {l}")));
            }
        }
        if self.layer_scales.windows(2).any(|w| w[1] >= w[0]) || self.layer_scales[l - 1] == 0 {
            return Err(Error::contract("layer scales must be positive and strictly decreasing"));
        }
        if self.layer_radii.iter().any(|&r| !(r > 0.0)) || !(self.enrich_radius > 0.0) {
            return Err(Error::contract("radii must be positive"));
        }
        let zero = |v: &[usize]| v.contains(&0);
        if zero(&self.group_sizes) || zero(&self.channel_widths) || zero(&self.decoder_widths) {
            return Err(Error::contract("group sizes and widths must be positive"));
        }
        if self.in_channels == 0 || self.k == 0 || self.mlp_depth == 0 || self.stack_depth == 0 {
            return Err(Error::contract("in_channels, k, mlp_depth and stack_depth must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::contract("num_classes must be positive"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::contract("leaky_slope must be finite"));
        }
        self.ablation.validate()
    }

    /// Checks that blocks of `samples` points can feed the first layer.
    pub fn validate_for_block(&self, samples: usize) -> Result<()> {
        self.validate()?;
        if self.layer_scales[0] > samples {
            return Err(Error::contract(format!(
                "first layer scale {} exceeds block size {samples}",
                self.layer_scales[0]
            )));
        }
        Ok(())
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        Self {
            ablation,
            ..self.clone()
        }
    }

    pub fn gpm_active(&self, layer: usize) -> bool {
        self.gpm_enabled[layer] && !self.ablation.disable_gpm
    }

    /// Width of the features entering the encoder.
    pub fn enriched_width(&self) -> usize {
        let c = self.in_channels;
        if self.ablation.disable_cr {
            c
        } else if self.ablation.concat_cr {
            c + self.k * c
        } else {
            2 * self.k * c
        }
    }

    /// Feature width at level `l`: 0 is the enriched input, `l ≥ 1` the
    /// output of encoder layer `l - 1`.
    pub fn level_width(&self, level: usize) -> usize {
        if level == 0 {
            return self.enriched_width();
        }
        let w = self.channel_widths[level - 1];
        if self.gpm_active(level - 1) {
            GpmParams::out_width(w)
        } else {
            w
        }
    }

    pub fn output_width(&self) -> usize {
        *self.decoder_widths.last().expect("validated")
    }

    pub fn attention_enabled(&self) -> bool {
        !self.ablation.disable_attention
    }

    /// Every parameter of the network, in initialization order.
    pub fn param_layout(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        if !self.ablation.disable_cr && !self.ablation.concat_cr {
            out.extend(EnrichmentParams::decl("enrich", self.in_channels, self.k));
        }
        for l in 0..self.num_layers() {
            let prefix = format!("enc{l}");
            // Relative xyz is prepended to every gathered member.
            let c_in = 3 + self.level_width(l);
            let w = self.channel_widths[l];
            if self.gpm_active(l) {
                out.extend(GpmParams::decl(&prefix, c_in, w, self.mlp_depth, self.stack_depth));
            } else {
                out.extend(Mlp::decl(&prefix, c_in, w, self.mlp_depth));
            }
        }
        let l = self.num_layers();
        let mut current = self.level_width(l);
        for (i, &w) in self.decoder_widths.iter().enumerate() {
            let lateral = self.level_width(l - 1 - i);
            out.extend(Linear::decl(&format!("dec{i}"), current + lateral, w));
            current = w;
        }
        out.extend(HeadParams::decl("head", current, self.num_classes, self.attention_enabled()));
        out
    }
}
