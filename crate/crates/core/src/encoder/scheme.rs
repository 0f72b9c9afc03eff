use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which encoder positions (1-indexed) are frozen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeScheme {
    /// Nothing frozen.
    F0,
    /// Every block frozen.
    Fall,
    /// Even positions frozen.
    #[default]
    Fa,
    /// Only the first block frozen.
    F1,
    /// First and last blocks frozen.
    Ffl,
    #[serde(rename = "custom")]
    Custom(Vec<usize>),
}

impl FreezeScheme {
    pub const NAMED: [FreezeScheme; 5] =
        [FreezeScheme::F0, FreezeScheme::Fall, FreezeScheme::Fa, FreezeScheme::F1, FreezeScheme::Ffl];
}

impl fmt::Display for FreezeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezeScheme::F0 => f.write_str("F0"),
            FreezeScheme::Fall => f.write_str("Fall"),
            FreezeScheme::Fa => f.write_str("Fa"),
            FreezeScheme::F1 => f.write_str("F1"),
            FreezeScheme::Ffl => f.write_str("Ffl"),
            FreezeScheme::Custom(ix) => {
                let parts: Vec<_> = ix.iter().map(usize::to_string).collect();
                write!(f, "custom[{}]", parts.join(","))
            }
        }
    }
}

impl FromStr for FreezeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f0" => Ok(FreezeScheme::F0),
            "fall" => Ok(FreezeScheme::Fall),
            "fa" => Ok(FreezeScheme::Fa),
            "f1" => Ok(FreezeScheme::F1),
            "ffl" => Ok(FreezeScheme::Ffl),
            _ => Err(Error::config("scheme", format!("unknown freeze scheme {s:?}"))),
        }
    }
}

/// Frozen positions for a stack of `layers` blocks.
pub fn plan_freeze_scheme(scheme: &FreezeScheme, layers: usize) -> Result<BTreeSet<usize>> {
    let all = 1..=layers;
    Ok(match scheme {
        FreezeScheme::F0 => BTreeSet::new(),
        FreezeScheme::Fall => all.collect(),
        FreezeScheme::Fa => all.filter(|i| i % 2 == 0).collect(),
        FreezeScheme::F1 => all.take(1).collect(),
        FreezeScheme::Ffl => {
            if layers == 1 {
                log::warn!("Ffl on a single block degenerates to freezing block 1 only");
            }
            [1, layers].into_iter().filter(|&i| i >= 1).collect()
        }
        FreezeScheme::Custom(ix) => {
            if let Some(bad) = ix.iter().find(|&&i| i == 0 || i > layers) {
                return Err(Error::config("scheme", format!("block {bad} outside 1..={layers}")));
            }
            ix.iter().copied().collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(s: FreezeScheme, l: usize) -> Vec<usize> {
        plan_freeze_scheme(&s, l).unwrap().into_iter().collect()
    }

    #[test]
    fn named_schemes() {
        assert_eq!(plan(FreezeScheme::Fa, 3), vec![2]);
        assert_eq!(plan(FreezeScheme::Fa, 4), vec![2, 4]);
        assert_eq!(plan(FreezeScheme::Fa, 5), vec![2, 4]);
        assert_eq!(plan(FreezeScheme::Fall, 5), vec![1, 2, 3, 4, 5]);
        assert_eq!(plan(FreezeScheme::F0, 6), Vec::<usize>::new());
        assert_eq!(plan(FreezeScheme::F1, 4), vec![1]);
        assert_eq!(plan(FreezeScheme::Ffl, 4), vec![1, 4]);
        assert_eq!(plan(FreezeScheme::Ffl, 1), vec![1]);
    }

    #[test]
    fn custom_masks_are_checked() {
        assert_eq!(plan(FreezeScheme::Custom(vec![3, 1]), 3), vec![1, 3]);
        assert!(plan_freeze_scheme(&FreezeScheme::Custom(vec![4]), 3).is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in FreezeScheme::NAMED {
            assert_eq!(s.to_string().parse::<FreezeScheme>().unwrap(), s);
        }
        let json = serde_json::to_string(&FreezeScheme::Custom(vec![2])).unwrap();
        assert_eq!(json, r#"{"custom":[2]}"#);
        assert_eq!(serde_json::to_string(&FreezeScheme::Fa).unwrap(), r#""Fa""#);
    }
}
