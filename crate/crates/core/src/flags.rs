//! Per-reading quality codes.

use std::fmt;
use std::str::FromStr;

/// A single quality-control code.
///
/// `C*` are geophysical range checks, `D*` consistency checks against
/// ancillary temperature and precipitation, `SPK`/`BRK`/`CST` come from the
/// spectral detectors, `M` marks a missing reading and `G` a reading with no
/// other code attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QcFlag {
    G,
    C01,
    C02,
    C03,
    D01,
    D02,
    D04,
    Spk,
    Brk,
    Cst,
    M,
}

impl QcFlag {
    pub const ALL: [QcFlag; 11] = [
        QcFlag::G,
        QcFlag::C01,
        QcFlag::C02,
        QcFlag::C03,
        QcFlag::D01,
        QcFlag::D02,
        QcFlag::D04,
        QcFlag::Spk,
        QcFlag::Brk,
        QcFlag::Cst,
        QcFlag::M,
    ];

    pub fn code(self) -> &'static str {
        match self {
            QcFlag::G => "G",
            QcFlag::C01 => "C01",
            QcFlag::C02 => "C02",
            QcFlag::C03 => "C03",
            QcFlag::D01 => "D01",
            QcFlag::D02 => "D02",
            QcFlag::D04 => "D04",
            QcFlag::Spk => "SPK",
            QcFlag::Brk => "BRK",
            QcFlag::Cst => "CST",
            QcFlag::M => "M",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }

    /// Codes produced by the spectral detectors.
    pub fn is_spectral(self) -> bool {
        matches!(self, QcFlag::Spk | QcFlag::Brk | QcFlag::Cst)
    }
}

impl fmt::Display for QcFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for QcFlag {
    type Err = UnknownFlag;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QcFlag::ALL
            .iter()
            .copied()
            .find(|f| f.code() == s)
            .ok_or_else(|| UnknownFlag(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown quality flag `{0}`")]
pub struct UnknownFlag(pub String);

/// Set of codes attached to one reading.
///
/// The empty set is the "not yet finalized" state; [`FlagSet::finalize`]
/// turns it into `{G}` or `{M}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FlagSet(u16);

impl FlagSet {
    pub const fn empty() -> Self {
        FlagSet(0)
    }

    pub fn only(flag: QcFlag) -> Self {
        FlagSet(flag.bit())
    }

    pub fn insert(&mut self, flag: QcFlag) {
        self.0 |= flag.bit();
    }

    pub fn contains(self, flag: QcFlag) -> bool {
        self.0 & flag.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: FlagSet) -> FlagSet {
        FlagSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = QcFlag> {
        QcFlag::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Resolve the good/missing codes: a missing reading carries exactly `M`;
    /// a present reading with no code becomes `G`; `G` is dropped whenever
    /// any other code is present.
    pub fn finalize(self, value_present: bool) -> FlagSet {
        if !value_present {
            return FlagSet::only(QcFlag::M);
        }
        let mut out = FlagSet(self.0 & !QcFlag::G.bit() & !QcFlag::M.bit());
        if out.is_empty() {
            out.insert(QcFlag::G);
        }
        out
    }

    /// Binary anomaly view used for scoring: `None` for missing readings,
    /// otherwise whether any code other than `G` is present.
    pub fn as_anomaly(self) -> Option<bool> {
        if self.contains(QcFlag::M) {
            None
        } else {
            Some(self.iter().any(|f| f != QcFlag::G))
        }
    }

    /// Keep only the spectral codes.
    pub fn spectral(self) -> FlagSet {
        FlagSet(self.0 & (QcFlag::Spk.bit() | QcFlag::Brk.bit() | QcFlag::Cst.bit()))
    }
}

impl FromIterator<QcFlag> for FlagSet {
    fn from_iter<I: IntoIterator<Item = QcFlag>>(iter: I) -> Self {
        let mut s = FlagSet::empty();
        for f in iter {
            s.insert(f);
        }
        s
    }
}

/// Semicolon-joined codes, e.g. `C01;SPK`.
impl fmt::Display for FlagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for flag in self.iter() {
            if !first {
                f.write_str(";")?;
            }
            f.write_str(flag.code())?;
            first = false;
        }
        Ok(())
    }
}

impl FromStr for FlagSet {
    type Err = UnknownFlag;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(FlagSet::empty());
        }
        s.split(';').map(|c| c.trim().parse::<QcFlag>()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_and_parse() {
        let set: FlagSet = [QcFlag::Spk, QcFlag::C01].into_iter().collect();
        assert_eq!(set.to_string(), "C01;SPK");
        assert_eq!("C01;SPK".parse::<FlagSet>().unwrap(), set);
        assert!("C01;XYZ".parse::<FlagSet>().is_err());
    }

    #[test]
    fn finalize_rules() {
        assert_eq!(FlagSet::empty().finalize(true), FlagSet::only(QcFlag::G));
        assert_eq!(FlagSet::only(QcFlag::C02).finalize(false), FlagSet::only(QcFlag::M));
        let mut s = FlagSet::only(QcFlag::G);
        s.insert(QcFlag::Brk);
        assert_eq!(s.finalize(true), FlagSet::only(QcFlag::Brk));
    }

    #[test]
    fn anomaly_view() {
        assert_eq!(FlagSet::only(QcFlag::G).as_anomaly(), Some(false));
        assert_eq!(FlagSet::only(QcFlag::D04).as_anomaly(), Some(true));
        assert_eq!(FlagSet::only(QcFlag::M).as_anomaly(), None);
    }
}
