//! Index of a checkpoint directory: what was trained and from which member
//! files.

use std::fmt::Write as _;
use std::path::Path;

use hlspower::{HecGnn, PowerKind, Variant};

use crate::failure::Failure;

pub const MANIFEST_SCHEMA: &str = "ensemble v1";
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct MemberEntry {
    pub file: String,
    pub seed: u64,
    pub fold: Option<usize>,
    pub best_epoch: usize,
    pub val_mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub power: PowerKind,
    pub target: String,
    pub variant: Variant,
    pub members: Vec<MemberEntry>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MANIFEST_SCHEMA}");
        let _ = writeln!(out, "power {}", self.power.name());
        let _ = writeln!(out, "target {}", self.target);
        let _ = writeln!(out, "variant {}", self.variant.name());
        for m in &self.members {
            let _ = writeln!(
                out,
                "member {} seed={} fold={} best_epoch={} val_mape={}",
                m.file,
                m.seed,
                opt(m.fold),
                m.best_epoch,
                opt(m.val_mape.map(|v| format!("{v:?}")))
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest, String> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        if lines.next().map(|(_, l)| l) != Some(MANIFEST_SCHEMA) {
            return Err(format!("line 1: expected `{MANIFEST_SCHEMA}`"));
        }
        let (mut power, mut target, mut variant) = (None, None, None);
        let mut members = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| format!("line {n}: {msg}");
            let (head, rest) = line
                .split_once(' ')
                .ok_or_else(|| at("missing value".into()))?;
            match head {
                "power" => power = Some(rest.parse::<PowerKind>().map_err(at)?),
                "target" => target = Some(rest.to_string()),
                "variant" => variant = Some(rest.parse::<Variant>().map_err(at)?),
                "member" => members.push(parse_member(rest).map_err(at)?),
                _ => return Err(at(format!("unknown record `{head}`"))),
            }
        }
        if members.is_empty() {
            return Err("no members listed".into());
        }
        Ok(Manifest {
            power: power.ok_or("missing `power`")?,
            target: target.ok_or("missing `target`")?,
            variant: variant.ok_or("missing `variant`")?,
            members,
        })
    }

    pub fn read(dir: &Path) -> Result<Manifest, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
        Manifest::parse(&text).map_err(|m| Failure::validation(format!("{}: {m}", path.display())))
    }

    pub fn load_models(&self, dir: &Path) -> Result<Vec<HecGnn>, Failure> {
        self.members
            .iter()
            .map(|m| {
                let path = dir.join(&m.file);
                let text = std::fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
                HecGnn::from_checkpoint(&text)
                    .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
            })
            .collect()
    }
}

fn parse_member(rest: &str) -> Result<MemberEntry, String> {
    let mut parts = rest.split_whitespace();
    let file = parts.next().ok_or("missing member file")?.to_string();
    if file.contains('/') || file.contains('\\') {
        return Err(format!("member file `{file}` must be a plain file name"));
    }
    let (mut seed, mut fold, mut best_epoch, mut val_mape) = (None, None, None, None);
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{kv}`"))?;
        let bad = || format!("bad value `{v}` for `{k}`");
        match k {
            "seed" => seed = Some(v.parse().map_err(|_| bad())?),
            "fold" => {
                fold = Some(if v == "-" {
                    None
                } else {
                    Some(v.parse().map_err(|_| bad())?)
                })
            }
            "best_epoch" => best_epoch = Some(v.parse().map_err(|_| bad())?),
            "val_mape" => {
                val_mape = Some(if v == "-" {
                    None
                } else {
                    Some(v.parse().map_err(|_| bad())?)
                })
            }
            _ => return Err(format!("unknown member field `{k}`")),
        }
    }
    Ok(MemberEntry {
        file,
        seed: seed.ok_or("missing seed")?,
        fold: fold.ok_or("missing fold")?,
        best_epoch: best_epoch.ok_or("missing best_epoch")?,
        val_mape: val_mape.ok_or("missing val_mape")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = Manifest {
            power: PowerKind::Dynamic,
            target: "memory".into(),
            variant: Variant::Proposed,
            members: vec![
                MemberEntry {
                    file: "m.ckpt".into(),
                    seed: 2,
                    fold: Some(7),
                    best_epoch: 31,
                    val_mape: Some(0.1 + 0.2),
                },
                MemberEntry {
                    file: "n.ckpt".into(),
                    seed: 0,
                    fold: None,
                    best_epoch: 0,
                    val_mape: None,
                },
            ],
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Manifest::parse("ensemble v2\n").is_err());
        assert!(Manifest::parse("ensemble v1\npower total\ntarget a\nvariant prop\n").is_err());
        assert!(Manifest::parse(
            "ensemble v1\npower total\ntarget a\nvariant prop\nmember ../x seed=0 fold=- best_epoch=0 val_mape=-\n"
        )
        .is_err());
    }
}
