//! Label vocabularies and patient/recording containers.

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Murmur class. The discriminant doubles as the class index used by the
/// murmur head and the scoring confusion matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MurmurLabel {
    Present = 0,
    Unknown = 1,
    Absent = 2,
}

impl MurmurLabel {
    pub const ALL: [MurmurLabel; 3] = [MurmurLabel::Present, MurmurLabel::Unknown, MurmurLabel::Absent];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MurmurLabel::Present => "Present",
            MurmurLabel::Unknown => "Unknown",
            MurmurLabel::Absent => "Absent",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Clinical outcome class; discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeLabel {
    Abnormal = 0,
    Normal = 1,
}

impl OutcomeLabel {
    pub const ALL: [OutcomeLabel; 2] = [OutcomeLabel::Abnormal, OutcomeLabel::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeLabel::Abnormal => "Abnormal",
            OutcomeLabel::Normal => "Normal",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBand {
    Neonate,
    Infant,
    Child,
    Adolescent,
    YoungAdult,
    Unknown,
}

impl AgeBand {
    pub const ALL: [AgeBand; 6] = [
        AgeBand::Neonate,
        AgeBand::Infant,
        AgeBand::Child,
        AgeBand::Adolescent,
        AgeBand::YoungAdult,
        AgeBand::Unknown,
    ];

    /// Header token; missing ages are written as "nan".
    pub fn as_str(self) -> &'static str {
        match self {
            AgeBand::Neonate => "Neonate",
            AgeBand::Infant => "Infant",
            AgeBand::Child => "Child",
            AgeBand::Adolescent => "Adolescent",
            AgeBand::YoungAdult => "Young Adult",
            AgeBand::Unknown => "nan",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "Male",
            Sex::Female => "Female",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        [Sex::Male, Sex::Female].into_iter().find(|x| x.as_str() == s)
    }
}

/// Auscultation site; `Phc` is the phonocardiogram-other channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    AV,
    PV,
    TV,
    MV,
    Phc,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::AV, Site::PV, Site::TV, Site::MV, Site::Phc];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::AV => "AV",
            Site::PV => "PV",
            Site::TV => "TV",
            Site::MV => "MV",
            Site::Phc => "Phc",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

/// Number of segmentation states: 0 unannotated, 1 S1, 2 systole, 3 S2,
/// 4 diastole.
pub const N_SEG_STATES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentInterval {
    pub start: f64,
    pub end: f64,
    pub state: u8,
}

impl SegmentInterval {
    pub fn new(start: f64, end: f64, state: u8) -> Result<Self> {
        if !(start >= 0.0 && start < end) || !end.is_finite() {
            return Err(Error::invalid(format!(
                "segment: need 0 <= start < end, got [{start}, {end})"
            )));
        }
        if state as usize >= N_SEG_STATES {
            return Err(Error::invalid(format!("segment: state {state} out of range")));
        }
        Ok(SegmentInterval { start, end, state })
    }
}

/// Validates that intervals are sorted and non-overlapping.
pub fn validate_segments(segments: &[SegmentInterval]) -> Result<()> {
    for pair in segments.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::invalid(format!(
                "segments overlap: [{}, {}) then [{}, {})",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Recording {
    pub site: Site,
    pub waveform: Waveform,
    pub murmur: MurmurLabel,
    pub segments: Vec<SegmentInterval>,
}

#[derive(Clone, Debug)]
pub struct PatientRecord {
    pub id: String,
    pub age: AgeBand,
    pub sex: Sex,
    pub pregnant: bool,
    pub murmur: MurmurLabel,
    pub murmur_locations: Vec<Site>,
    pub outcome: OutcomeLabel,
    pub recordings: Vec<Recording>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.recordings.is_empty() {
            return Err(Error::invalid(format!("patient {}: no recordings", self.id)));
        }
        if self.murmur == MurmurLabel::Present {
            if self.murmur_locations.is_empty() {
                return Err(Error::invalid(format!(
                    "patient {}: murmur Present but no murmur locations",
                    self.id
                )));
            }
            for loc in &self.murmur_locations {
                if !self.recordings.iter().any(|r| r.site == *loc) {
                    return Err(Error::invalid(format!(
                        "patient {}: murmur location {} has no recording",
                        self.id,
                        loc.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stratification key: demographics plus both prediction targets.
    pub fn stratum(&self) -> (AgeBand, Sex, bool, MurmurLabel, OutcomeLabel) {
        (self.age, self.sex, self.pregnant, self.murmur, self.outcome)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
}

/// Per-recording murmur label from the patient-level annotation: a Present
/// patient marks exactly the annotated sites Present and the rest Absent;
/// Unknown and Absent broadcast unchanged.
pub fn derive_recording_murmur(
    patient_murmur: MurmurLabel,
    murmur_locations: &[Site],
    site: Site,
) -> MurmurLabel {
    match patient_murmur {
        MurmurLabel::Present => {
            if murmur_locations.contains(&site) {
                MurmurLabel::Present
            } else {
                MurmurLabel::Absent
            }
        }
        MurmurLabel::Unknown => MurmurLabel::Unknown,
        MurmurLabel::Absent => MurmurLabel::Absent,
    }
}
