//! Patient header / TSV parsing.
//!
//! Layout per patient: `<ID>.txt` next to its `.wav` and `.tsv` files.
//! Header line 1 is `<ID> <num_locations> <fs>`, followed by one line per
//! recording (`<SITE> <wav> <tsv>`), followed by `#Key: value` metadata.

use std::path::Path;

use crate::dsp::wav::read_wav;
use crate::error::{Error, Result};

use super::types::*;

/// Everything a header states, before any audio is loaded.
#[derive(Clone, Debug)]
pub struct HeaderMeta {
    pub id: String,
    pub fs: u32,
    pub entries: Vec<(Site, String, String)>,
    pub age: AgeBand,
    pub sex: Sex,
    pub pregnant: bool,
    pub murmur: MurmurLabel,
    pub murmur_locations: Vec<Site>,
    pub outcome: OutcomeLabel,
}

fn perr(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses header text. Unrecognized `#Key:` lines are ignored; anything
/// else out of grammar is an error naming the line.
pub fn parse_header(text: &str, path: &Path) -> Result<HeaderMeta> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (lineno, first) = lines
        .next()
        .ok_or_else(|| perr(path, 1, "empty header"))?;
    let toks: Vec<&str> = first.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(perr(path, lineno, "expected `<ID> <num_locations> <fs>`"));
    }
    let id = toks[0].to_string();
    let n_loc: usize = toks[1]
        .parse()
        .map_err(|_| perr(path, lineno, format!("bad location count {:?}", toks[1])))?;
    let fs: u32 = toks[2]
        .parse()
        .map_err(|_| perr(path, lineno, format!("bad sampling rate {:?}", toks[2])))?;
    if fs == 0 {
        return Err(perr(path, lineno, "sampling rate must be positive"));
    }

    let mut entries = Vec::with_capacity(n_loc);
    for _ in 0..n_loc {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| perr(path, n_loc + 1, format!("expected {n_loc} recording lines")))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(perr(path, lineno, "expected `<SITE> <wav> <tsv>`"));
        }
        let site = Site::from_str(toks[0])
            .ok_or_else(|| perr(path, lineno, format!("unknown site {:?}", toks[0])))?;
        entries.push((site, toks[1].to_string(), toks[2].to_string()));
    }

    let mut age = None;
    let mut sex = None;
    let mut pregnant = None;
    let mut murmur = None;
    let mut murmur_locations = None;
    let mut outcome = None;
    let mut last_line = n_loc + 1;
    for (lineno, line) in lines {
        last_line = lineno;
        if line.trim().is_empty() {
            continue;
        }
        let Some(rest) = line.strip_prefix('#') else {
            return Err(perr(path, lineno, "expected `#Key: value` metadata line"));
        };
        let Some((key, value)) = rest.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "Age" => {
                age = Some(AgeBand::from_str(value).ok_or_else(|| {
                    perr(path, lineno, format!("unknown age band {value:?}"))
                })?)
            }
            "Sex" => {
                sex = Some(Sex::from_str(value).ok_or_else(|| {
                    perr(path, lineno, format!("unknown sex {value:?}"))
                })?)
            }
            "Pregnancy status" => {
                pregnant = Some(match value {
                    "True" => true,
                    "False" => false,
                    _ => return Err(perr(path, lineno, format!("bad pregnancy flag {value:?}"))),
                })
            }
            "Murmur" => {
                murmur = Some(MurmurLabel::from_str(value).ok_or_else(|| {
                    perr(path, lineno, format!("unknown murmur label {value:?}"))
                })?)
            }
            "Murmur locations" => {
                let locs = if value == "nan" {
                    Vec::new()
                } else {
                    value
                        .split('+')
                        .map(|tok| {
                            Site::from_str(tok).ok_or_else(|| {
                                perr(path, lineno, format!("unknown murmur location {tok:?}"))
                            })
                        })
                        .collect::<Result<Vec<Site>>>()?
                };
                murmur_locations = Some(locs);
            }
            "Outcome" => {
                outcome = Some(OutcomeLabel::from_str(value).ok_or_else(|| {
                    perr(path, lineno, format!("unknown outcome label {value:?}"))
                })?)
            }
            _ => {}
        }
    }

    let missing = |key: &str| perr(path, last_line, format!("missing #{key} metadata"));
    Ok(HeaderMeta {
        id,
        fs,
        entries,
        age: age.ok_or_else(|| missing("Age"))?,
        sex: sex.ok_or_else(|| missing("Sex"))?,
        pregnant: pregnant.ok_or_else(|| missing("Pregnancy status"))?,
        murmur: murmur.ok_or_else(|| missing("Murmur"))?,
        murmur_locations: murmur_locations.ok_or_else(|| missing("Murmur locations"))?,
        outcome: outcome.ok_or_else(|| missing("Outcome"))?,
    })
}

/// Parses a segmentation TSV: `start<TAB>end<TAB>state` per line.
pub fn parse_segments(text: &str, path: &Path) -> Result<Vec<SegmentInterval>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(perr(path, lineno, "expected `start end state`"));
        }
        let start: f64 = toks[0]
            .parse()
            .map_err(|_| perr(path, lineno, format!("bad start time {:?}", toks[0])))?;
        let end: f64 = toks[1]
            .parse()
            .map_err(|_| perr(path, lineno, format!("bad end time {:?}", toks[1])))?;
        let state: u8 = toks[2]
            .parse()
            .map_err(|_| perr(path, lineno, format!("bad state {:?}", toks[2])))?;
        out.push(
            SegmentInterval::new(start, end, state)
                .map_err(|e| perr(path, lineno, e.to_string()))?,
        );
    }
    validate_segments(&out).map_err(|e| perr(path, 1, e.to_string()))?;
    Ok(out)
}

/// Loads one patient: header plus every referenced wav/tsv (paths resolved
/// relative to the header's directory).
pub fn parse_patient(header_path: &Path) -> Result<PatientRecord> {
    let text =
        std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let meta = parse_header(&text, header_path)?;
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));

    let mut recordings = Vec::with_capacity(meta.entries.len());
    for (site, wav_name, tsv_name) in &meta.entries {
        let wav_path = dir.join(wav_name);
        let waveform = read_wav(&wav_path)?;
        if waveform.fs != meta.fs {
            return Err(Error::invalid(format!(
                "{}: sample rate {} does not match header rate {}",
                wav_path.display(),
                waveform.fs,
                meta.fs
            )));
        }
        let tsv_path = dir.join(tsv_name);
        let tsv_text =
            std::fs::read_to_string(&tsv_path).map_err(|e| Error::io(&tsv_path, e))?;
        let segments = parse_segments(&tsv_text, &tsv_path)?;
        recordings.push(Recording {
            site: *site,
            waveform,
            murmur: derive_recording_murmur(meta.murmur, &meta.murmur_locations, *site),
            segments,
        });
    }

    let patient = PatientRecord {
        id: meta.id,
        age: meta.age,
        sex: meta.sex,
        pregnant: meta.pregnant,
        murmur: meta.murmur,
        murmur_locations: meta.murmur_locations,
        outcome: meta.outcome,
        recordings,
    };
    patient.validate()?;
    Ok(patient)
}

/// Header labels only, without touching the audio files.
pub fn parse_labels(header_path: &Path) -> Result<HeaderMeta> {
    let text =
        std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    parse_header(&text, header_path)
}

fn header_paths(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every `<ID>.txt` patient in a directory, sorted by filename.
pub fn load_dataset(dir: &Path) -> Result<Vec<PatientRecord>> {
    header_paths(dir)?.iter().map(|p| parse_patient(p)).collect()
}

/// Loads labels for every patient in a directory, sorted by filename.
pub fn load_labels(dir: &Path) -> Result<Vec<HeaderMeta>> {
    header_paths(dir)?.iter().map(|p| parse_labels(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{wav::write_wav, Waveform};

    const HEADER: &str = "\
85012 2 4000
AV 85012_AV.wav 85012_AV.tsv
PV 85012_PV.wav 85012_PV.tsv
#Age: Child
#Sex: Female
#Pregnancy status: False
#Murmur: Present
#Murmur locations: AV+PV
#Outcome: Abnormal
";

    fn write_fixture(dir: &Path, header: &str) {
        std::fs::write(dir.join("85012.txt"), header).unwrap();
        let w = Waveform::new(vec![0.25; 4000], 4000).unwrap();
        for site in ["AV", "PV"] {
            write_wav(&dir.join(format!("85012_{site}.wav")), &w).unwrap();
            std::fs::write(
                dir.join(format!("85012_{site}.tsv")),
                "0.0000\t0.5000\t1\n0.5000\t0.9000\t2\n",
            )
            .unwrap();
        }
    }

    #[test]
    fn parses_full_patient() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), HEADER);
        let p = parse_patient(&dir.path().join("85012.txt")).unwrap();
        assert_eq!(p.id, "85012");
        assert_eq!(p.age, AgeBand::Child);
        assert_eq!(p.sex, Sex::Female);
        assert!(!p.pregnant);
        assert_eq!(p.murmur, MurmurLabel::Present);
        assert_eq!(p.outcome, OutcomeLabel::Abnormal);
        assert_eq!(p.recordings.len(), 2);
        for r in &p.recordings {
            assert_eq!(r.murmur, MurmurLabel::Present);
            assert_eq!(r.waveform.fs, 4000);
            assert_eq!(r.segments.len(), 2);
        }
    }

    #[test]
    fn murmur_sites_drive_recording_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &HEADER.replace("#Murmur locations: AV+PV", "#Murmur locations: AV"),
        );
        let p = parse_patient(&dir.path().join("85012.txt")).unwrap();
        assert_eq!(p.recordings[0].murmur, MurmurLabel::Present);
        assert_eq!(p.recordings[1].murmur, MurmurLabel::Absent);
    }

    #[test]
    fn unknown_murmur_broadcasts() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &HEADER
                .replace("#Murmur: Present", "#Murmur: Unknown")
                .replace("#Murmur locations: AV+PV", "#Murmur locations: nan"),
        );
        let p = parse_patient(&dir.path().join("85012.txt")).unwrap();
        assert!(p.recordings.iter().all(|r| r.murmur == MurmurLabel::Unknown));
        assert!(p.murmur_locations.is_empty());
    }

    #[test]
    fn bad_outcome_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &HEADER.replace("#Outcome: Abnormal", "#Outcome: Maybe"),
        );
        let err = parse_patient(&dir.path().join("85012.txt")).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 9);
                assert!(msg.contains("Maybe"), "{msg}");
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn bad_site_and_short_recording_list() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_header("x 1 4000\nXX a.wav a.tsv\n", Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_header("x 2 4000\nAV a.wav a.tsv\n", Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        drop(dir);
    }

    #[test]
    fn missing_metadata_is_an_error() {
        let text = "x 0 4000\n#Sex: Male\n#Pregnancy status: False\n#Murmur: Absent\n#Murmur locations: nan\n#Outcome: Normal\n";
        let err = parse_header(text, Path::new("x.txt")).unwrap_err();
        assert!(err.to_string().contains("#Age"), "{err}");
    }

    #[test]
    fn nan_age_maps_to_unknown_and_extra_keys_ignored() {
        let text = "x 0 4000\n#Age: nan\n#Sex: Male\n#Pregnancy status: True\n#Murmur: Absent\n#Murmur locations: nan\n#Outcome: Normal\n#Campaign: CC2015\n";
        let meta = parse_header(text, Path::new("x.txt")).unwrap();
        assert_eq!(meta.age, AgeBand::Unknown);
        assert!(meta.pregnant);
    }

    #[test]
    fn missing_wav_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("85012.txt"), HEADER).unwrap();
        let err = parse_patient(&dir.path().join("85012.txt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn segment_parse_checks_vocabulary_and_order() {
        let p = Path::new("s.tsv");
        assert!(parse_segments("0.0\t0.5\t1\n0.5\t1.0\t2\n", p).is_ok());
        assert!(parse_segments("0.0\t0.5\t7\n", p).is_err());
        assert!(parse_segments("0.6\t0.5\t1\n", p).is_err());
        assert!(parse_segments("0.0\t0.6\t1\n0.5\t1.0\t2\n", p).is_err());
        assert!(parse_segments("0.0\tx\t1\n", p).is_err());
    }
}
