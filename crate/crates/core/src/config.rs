//! Pipeline configuration and its `key = value` file format.
//!
//! Every key is optional; absent keys take the defaults below. Lists are
//! separated by `|`, pairs by `,`, and the image size is written `WxH`.
//! Lines starting with `#` (and anything after a ` #`) are comments.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_FG_TEMPLATES: [&str; 6] = [
    "A photo of <object>",
    "A realistic photo of <object>",
    "A photo of <object> in pure background",
    "<object> in a white background",
    "<object> without background",
    "<object> isolated on white background",
];

/// Context-sentence templates used with words extracted from CDI captions.
pub const DEFAULT_CONTEXT_TEMPLATES: [&str; 4] = [
    "a real image of <context>",
    "a high resolution image of <context>",
    "a wide angle view of <context>",
    "an empty scene of <context>",
];

/// Placeholder prompts for zero-shot background generation. Replace them
/// through the `zero_shot_prompts` key for a specific deployment domain.
pub const DEFAULT_ZERO_SHOT_PROMPTS: [&str; 16] = [
    "a real image of a grass field",
    "a real image of a forest",
    "a real image of a city street",
    "a real image of a living room",
    "a real image of a kitchen",
    "a real image of a beach",
    "a real image of a farm",
    "a real image of a highway",
    "a real image of a park",
    "a real image of a lake",
    "a real image of a mountain road",
    "a real image of an airport runway",
    "a real image of a harbor",
    "a real image of a dining room",
    "a real image of a train station",
    "a real image of a cloudy sky",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed entry: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("{}key `{key}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invariant {
        key: String,
        line: Option<usize>,
        message: String,
    },
}

/// How the two background filter rules are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// Reject on class similarity, then rank survivors by caption similarity.
    RejectThenRank,
    /// Rank by `caption_similarity - class_weight * max_class_similarity`.
    Weighted,
}

impl FilterMode {
    fn as_str(self) -> &'static str {
        match self {
            FilterMode::RejectThenRank => "reject_then_rank",
            FilterMode::Weighted => "weighted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub num_cdis_per_class: u32,
    pub captions_per_cdi: u32,
    pub images_per_caption: u32,
    pub keep_per_caption: u32,
    pub context_templates: Vec<String>,
    pub zero_shot_templates: u32,
    pub zero_shot_prompts: Vec<String>,
    pub images_per_zero_shot_template: u32,
    pub zero_shot_prune_fraction: f64,
    pub fg_templates: Vec<String>,
    pub fg_images_per_template: u32,
    pub fg_keep_per_template: u32,
    pub pastes_per_image: u32,
    pub target_dataset_size: u64,
    pub blur_sigma: f64,
    /// Half-width of the symmetric rotation interval, in degrees.
    pub rotation_range: f64,
    pub scale_range: (f64, f64),
    pub min_visible_fraction: f64,
    pub occlusion_drop_fraction: f64,
    pub image_size: (u32, u32),
    pub master_seed: u64,
    pub reject_threshold: f64,
    pub filter_mode: FilterMode,
    pub class_weight: f64,
    pub class_prompt_template: String,
    pub color_threshold: f64,
    pub min_segment_fraction: f64,
    pub area_bounds: (f64, f64),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_cdis_per_class: 1,
            captions_per_cdi: 2,
            images_per_caption: 80,
            keep_per_caption: 30,
            context_templates: DEFAULT_CONTEXT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            zero_shot_templates: 16,
            zero_shot_prompts: DEFAULT_ZERO_SHOT_PROMPTS.iter().map(|s| s.to_string()).collect(),
            images_per_zero_shot_template: 600,
            zero_shot_prune_fraction: 0.05,
            fg_templates: DEFAULT_FG_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            fg_images_per_template: 500,
            fg_keep_per_template: 250,
            pastes_per_image: 4,
            target_dataset_size: 60_000,
            blur_sigma: 2.0,
            rotation_range: 30.0,
            scale_range: (0.5, 1.5),
            min_visible_fraction: 0.25,
            occlusion_drop_fraction: 0.25,
            image_size: (512, 512),
            master_seed: 0,
            reject_threshold: 0.26,
            filter_mode: FilterMode::RejectThenRank,
            class_weight: 1.0,
            class_prompt_template: "a photo of <object>".to_string(),
            color_threshold: 40.0,
            min_segment_fraction: 0.001,
            area_bounds: (0.02, 0.90),
        }
    }
}

const KEYS: &[&str] = &[
    "num_cdis_per_class",
    "captions_per_cdi",
    "images_per_caption",
    "keep_per_caption",
    "context_templates",
    "zero_shot_templates",
    "zero_shot_prompts",
    "images_per_zero_shot_template",
    "zero_shot_prune_fraction",
    "fg_templates",
    "fg_images_per_template",
    "fg_keep_per_template",
    "pastes_per_image",
    "target_dataset_size",
    "blur_sigma",
    "rotation_range",
    "scale_range",
    "min_visible_fraction",
    "occlusion_drop_fraction",
    "image_size",
    "master_seed",
    "reject_threshold",
    "filter_mode",
    "class_weight",
    "class_prompt_template",
    "color_threshold",
    "min_segment_fraction",
    "area_bounds",
];

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            line: self.line,
            key: self.key.to_string(),
            message: message.into(),
        }
    }

    fn uint<T: std::str::FromStr>(&self) -> Result<T, ConfigError> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("expected a nonnegative integer, got `{}`", self.value)))
    }

    fn real(&self) -> Result<f64, ConfigError> {
        let v: f64 = self
            .value
            .parse()
            .map_err(|_| self.err(format!("expected a number, got `{}`", self.value)))?;
        if !v.is_finite() {
            return Err(self.err("value must be finite"));
        }
        Ok(v)
    }

    fn pair(&self) -> Result<(f64, f64), ConfigError> {
        let parts: Vec<&str> = self.value.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(self.err(format!("expected `a, b`, got `{}`", self.value)));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| self.err(format!("`{s}` is not a number")))
        };
        Ok((parse(parts[0])?, parse(parts[1])?))
    }

    fn list(&self) -> Result<Vec<String>, ConfigError> {
        let items: Vec<String> = self
            .value
            .split('|')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if items.is_empty() {
            return Err(self.err("list must not be empty"));
        }
        Ok(items)
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let mut lines_of: HashMap<&'static str, usize> = HashMap::new();
        let mut zero_shot_count_set = false;
        let mut zero_shot_prompts_set = false;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = strip_comment(raw).trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got `{body}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })?;
            if let Some(prev) = lines_of.insert(known, line) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("key `{key}` already set on line {prev}"),
                });
            }
            let e = Entry { line, key, value };
            match key {
                "num_cdis_per_class" => cfg.num_cdis_per_class = e.uint()?,
                "captions_per_cdi" => cfg.captions_per_cdi = e.uint()?,
                "images_per_caption" => cfg.images_per_caption = e.uint()?,
                "keep_per_caption" => cfg.keep_per_caption = e.uint()?,
                "context_templates" => cfg.context_templates = e.list()?,
                "zero_shot_templates" => {
                    cfg.zero_shot_templates = e.uint()?;
                    zero_shot_count_set = true;
                }
                "zero_shot_prompts" => {
                    cfg.zero_shot_prompts = e.list()?;
                    zero_shot_prompts_set = true;
                }
                "images_per_zero_shot_template" => cfg.images_per_zero_shot_template = e.uint()?,
                "zero_shot_prune_fraction" => cfg.zero_shot_prune_fraction = e.real()?,
                "fg_templates" => cfg.fg_templates = e.list()?,
                "fg_images_per_template" => cfg.fg_images_per_template = e.uint()?,
                "fg_keep_per_template" => cfg.fg_keep_per_template = e.uint()?,
                "pastes_per_image" => cfg.pastes_per_image = e.uint()?,
                "target_dataset_size" => cfg.target_dataset_size = e.uint()?,
                "blur_sigma" => cfg.blur_sigma = e.real()?,
                "rotation_range" => cfg.rotation_range = e.real()?,
                "scale_range" => cfg.scale_range = e.pair()?,
                "min_visible_fraction" => cfg.min_visible_fraction = e.real()?,
                "occlusion_drop_fraction" => cfg.occlusion_drop_fraction = e.real()?,
                "image_size" => {
                    let (w, h) = value
                        .split_once(['x', 'X'])
                        .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)))
                        .ok_or_else(|| e.err(format!("expected `WxH`, got `{value}`")))?;
                    cfg.image_size = (w, h);
                }
                "master_seed" => cfg.master_seed = e.uint()?,
                "reject_threshold" => cfg.reject_threshold = e.real()?,
                "filter_mode" => {
                    cfg.filter_mode = match value {
                        "reject_then_rank" => FilterMode::RejectThenRank,
                        "weighted" => FilterMode::Weighted,
                        other => return Err(e.err(format!("expected `reject_then_rank` or `weighted`, got `{other}`"))),
                    }
                }
                "class_weight" => cfg.class_weight = e.real()?,
                "class_prompt_template" => cfg.class_prompt_template = value.to_string(),
                "color_threshold" => cfg.color_threshold = e.real()?,
                "min_segment_fraction" => cfg.min_segment_fraction = e.real()?,
                "area_bounds" => cfg.area_bounds = e.pair()?,
                _ => unreachable!("key table and match arms out of sync"),
            }
        }

        // A bare count selects a prefix of the default prompt list.
        if zero_shot_count_set && !zero_shot_prompts_set {
            let n = cfg.zero_shot_templates as usize;
            if n > DEFAULT_ZERO_SHOT_PROMPTS.len() {
                return Err(ConfigError::Invariant {
                    key: "zero_shot_templates".into(),
                    line: lines_of.get("zero_shot_templates").copied(),
                    message: format!(
                        "{n} templates requested but only {} defaults exist; set zero_shot_prompts",
                        DEFAULT_ZERO_SHOT_PROMPTS.len()
                    ),
                });
            }
            cfg.zero_shot_prompts.truncate(n);
        } else if zero_shot_prompts_set && !zero_shot_count_set {
            cfg.zero_shot_templates = cfg.zero_shot_prompts.len() as u32;
        }

        cfg.validate_with(|key| lines_of.get(key).copied())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(|_| None)
    }

    fn validate_with(&self, line_of: impl Fn(&str) -> Option<usize>) -> Result<(), ConfigError> {
        let fail = |key: &str, message: String| ConfigError::Invariant {
            key: key.to_string(),
            line: line_of(key),
            message,
        };
        let positive = [
            ("captions_per_cdi", self.captions_per_cdi as u64),
            ("images_per_caption", self.images_per_caption as u64),
            ("keep_per_caption", self.keep_per_caption as u64),
            (
                "images_per_zero_shot_template",
                self.images_per_zero_shot_template as u64,
            ),
            ("fg_images_per_template", self.fg_images_per_template as u64),
            ("fg_keep_per_template", self.fg_keep_per_template as u64),
            ("pastes_per_image", self.pastes_per_image as u64),
            ("target_dataset_size", self.target_dataset_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(fail(key, "must be positive".into()));
            }
        }
        if self.keep_per_caption > self.images_per_caption {
            return Err(fail(
                "keep_per_caption",
                format!(
                    "keep_per_caption ({}) exceeds images_per_caption ({})",
                    self.keep_per_caption, self.images_per_caption
                ),
            ));
        }
        if self.fg_keep_per_template > self.fg_images_per_template {
            return Err(fail(
                "fg_keep_per_template",
                format!(
                    "fg_keep_per_template ({}) exceeds fg_images_per_template ({})",
                    self.fg_keep_per_template, self.fg_images_per_template
                ),
            ));
        }
        if self.zero_shot_prompts.len() != self.zero_shot_templates as usize {
            return Err(fail(
                "zero_shot_templates",
                format!(
                    "count {} does not match {} zero_shot_prompts",
                    self.zero_shot_templates,
                    self.zero_shot_prompts.len()
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.zero_shot_prune_fraction) {
            return Err(fail("zero_shot_prune_fraction", "must lie in [0, 1]".into()));
        }
        if self.blur_sigma < 0.0 {
            return Err(fail("blur_sigma", "must be nonnegative".into()));
        }
        if self.rotation_range < 0.0 {
            return Err(fail("rotation_range", "must be nonnegative".into()));
        }
        let (lo, hi) = self.scale_range;
        if lo <= 0.0 || hi < lo {
            return Err(fail("scale_range", format!("need 0 < min <= max, got {lo}, {hi}")));
        }
        for (key, v) in [
            ("min_visible_fraction", self.min_visible_fraction),
            ("occlusion_drop_fraction", self.occlusion_drop_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(fail(key, "must lie in (0, 1]".into()));
            }
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(fail("image_size", "dimensions must be at least 1".into()));
        }
        let (amin, amax) = self.area_bounds;
        if !(0.0..=1.0).contains(&amin) || !(0.0..=1.0).contains(&amax) || amin > amax {
            return Err(fail(
                "area_bounds",
                format!("need 0 <= min <= max <= 1, got {amin}, {amax}"),
            ));
        }
        if !(0.0..1.0).contains(&self.min_segment_fraction) {
            return Err(fail("min_segment_fraction", "must lie in [0, 1)".into()));
        }
        if self.color_threshold < 0.0 {
            return Err(fail("color_threshold", "must be nonnegative".into()));
        }
        for (key, list) in [
            ("context_templates", &self.context_templates),
            ("zero_shot_prompts", &self.zero_shot_prompts),
            ("fg_templates", &self.fg_templates),
        ] {
            if list.iter().any(|t| t.contains('|') || t.contains('#')) {
                return Err(fail(key, "entries may not contain `|` or `#`".into()));
            }
        }
        if !self.fg_templates.iter().all(|t| t.contains("<object")) {
            return Err(fail("fg_templates", "every template needs an <object> slot".into()));
        }
        if !self.context_templates.iter().all(|t| t.contains("<context")) {
            return Err(fail(
                "context_templates",
                "every template needs a <context> slot".into(),
            ));
        }
        Ok(())
    }

    /// Serialize every key in a fixed order. Reloading the output yields an
    /// identical config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("num_cdis_per_class", self.num_cdis_per_class.to_string());
        put("captions_per_cdi", self.captions_per_cdi.to_string());
        put("images_per_caption", self.images_per_caption.to_string());
        put("keep_per_caption", self.keep_per_caption.to_string());
        put("context_templates", self.context_templates.join(" | "));
        put("zero_shot_templates", self.zero_shot_templates.to_string());
        put("zero_shot_prompts", self.zero_shot_prompts.join(" | "));
        put(
            "images_per_zero_shot_template",
            self.images_per_zero_shot_template.to_string(),
        );
        put("zero_shot_prune_fraction", self.zero_shot_prune_fraction.to_string());
        put("fg_templates", self.fg_templates.join(" | "));
        put("fg_images_per_template", self.fg_images_per_template.to_string());
        put("fg_keep_per_template", self.fg_keep_per_template.to_string());
        put("pastes_per_image", self.pastes_per_image.to_string());
        put("target_dataset_size", self.target_dataset_size.to_string());
        put("blur_sigma", self.blur_sigma.to_string());
        put("rotation_range", self.rotation_range.to_string());
        put("scale_range", format!("{}, {}", self.scale_range.0, self.scale_range.1));
        put("min_visible_fraction", self.min_visible_fraction.to_string());
        put("occlusion_drop_fraction", self.occlusion_drop_fraction.to_string());
        put("image_size", format!("{}x{}", self.image_size.0, self.image_size.1));
        put("master_seed", self.master_seed.to_string());
        put("reject_threshold", self.reject_threshold.to_string());
        put("filter_mode", self.filter_mode.as_str().to_string());
        put("class_weight", self.class_weight.to_string());
        put("class_prompt_template", self.class_prompt_template.clone());
        put("color_threshold", self.color_threshold.to_string());
        put("min_segment_fraction", self.min_segment_fraction.to_string());
        put("area_bounds", format!("{}, {}", self.area_bounds.0, self.area_bounds.1));
        s
    }
}
