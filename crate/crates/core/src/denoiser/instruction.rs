//! Discrete edit codes standing in for natural-language instructions.

use std::fmt;

use crate::error::{Error, Result};

pub const CATALOG_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EditCode {
    /// Recolor the foreground shapes to a target hue in `[0, 1)`.
    RecolorFg,
    /// Multiply background values by a factor.
    DarkenBg,
    /// Blend the background toward white by a factor.
    BrightenBg,
    /// Redraw the foreground as another shape kind (0 circle, 1 square, 2 triangle).
    SwapShape,
    /// Invert every pixel value.
    InvertStyle,
    /// Add a warm halo around the foreground.
    AddGlow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    None,
    /// Half-open `[lo, hi)`.
    HalfOpen(f32, f32),
    Closed(f32, f32),
    /// One of `0..n`.
    Choice(u32),
}

impl EditCode {
    pub const ALL: [EditCode; 6] = [
        EditCode::RecolorFg,
        EditCode::DarkenBg,
        EditCode::BrightenBg,
        EditCode::SwapShape,
        EditCode::InvertStyle,
        EditCode::AddGlow,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Catalog(format!("unknown edit code {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            EditCode::RecolorFg => "recolor_fg",
            EditCode::DarkenBg => "darken_bg",
            EditCode::BrightenBg => "brighten_bg",
            EditCode::SwapShape => "swap_shape",
            EditCode::InvertStyle => "invert_style",
            EditCode::AddGlow => "add_glow",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Catalog(format!("unknown edit code {name:?}")))
    }

    pub fn param_kind(self) -> ParamKind {
        match self {
            EditCode::RecolorFg => ParamKind::HalfOpen(0.0, 1.0),
            EditCode::DarkenBg | EditCode::BrightenBg | EditCode::AddGlow => ParamKind::Closed(0.1, 1.0),
            EditCode::SwapShape => ParamKind::Choice(3),
            EditCode::InvertStyle => ParamKind::None,
        }
    }

    /// Whether the edit is confined to (a neighbourhood of) the foreground mask.
    pub fn is_local(self) -> bool {
        matches!(self, EditCode::RecolorFg | EditCode::SwapShape | EditCode::AddGlow)
    }
}

/// An edit code plus its scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditInstruction {
    code: EditCode,
    param: Option<f32>,
}

impl EditInstruction {
    pub fn new(code: EditCode, param: Option<f32>) -> Result<Self> {
        let bad = |why: &str| Err(Error::Catalog(format!("{}: {why}", code.name())));
        match (code.param_kind(), param) {
            (ParamKind::None, None) => {}
            (ParamKind::None, Some(_)) => return bad("takes no parameter"),
            (_, None) => return bad("parameter required"),
            (ParamKind::HalfOpen(lo, hi), Some(p)) if !(p >= lo && p < hi) => {
                return bad(&format!("parameter {p} outside [{lo}, {hi})"))
            }
            (ParamKind::Closed(lo, hi), Some(p)) if !(p >= lo && p <= hi) => {
                return bad(&format!("parameter {p} outside [{lo}, {hi}]"))
            }
            (ParamKind::Choice(n), Some(p)) if !(p >= 0.0 && p.fract() == 0.0 && (p as u32) < n) => {
                return bad(&format!("parameter {p} is not one of 0..{n}"))
            }
            _ => {}
        }
        Ok(Self { code, param })
    }

    pub fn from_id(id: usize, param: Option<f32>) -> Result<Self> {
        Self::new(EditCode::from_id(id)?, param)
    }

    pub fn code(&self) -> EditCode {
        self.code
    }

    pub fn param(&self) -> Option<f32> {
        self.param
    }

    /// Parses `name` or `name:param`, e.g. `recolor_fg:0.6`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => {
                let p: f32 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::Catalog(format!("bad instruction parameter in {s:?}")))?;
                (n, Some(p))
            }
            None => (s, None),
        };
        Self::new(EditCode::parse(name.trim())?, param)
    }
}

impl fmt::Display for EditInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param {
            Some(p) => write!(f, "{}:{p}", self.code.name()),
            None => f.write_str(self.code.name()),
        }
    }
}
