//! Writes patients back to the on-disk layout the parser reads.

use std::fmt::Write as _;
use std::path::Path;

use crate::dsp::wav::write_wav;
use crate::error::{Error, Result};

use super::types::PatientRecord;

pub fn write_patient(dir: &Path, p: &PatientRecord) -> Result<()> {
    p.validate()?;
    let fs = p.recordings[0].waveform.fs;
    if p.recordings.iter().any(|r| r.waveform.fs != fs) {
        return Err(Error::invalid(format!(
            "patient {}: recordings disagree on sampling rate",
            p.id
        )));
    }
    let mut sites_seen = std::collections::HashSet::new();
    for r in &p.recordings {
        if !sites_seen.insert(r.site) {
            return Err(Error::invalid(format!(
                "patient {}: duplicate site {}",
                p.id,
                r.site.as_str()
            )));
        }
    }

    let mut header = format!("{} {} {}\n", p.id, p.recordings.len(), fs);
    for r in &p.recordings {
        let site = r.site.as_str();
        writeln!(header, "{site} {id}_{site}.wav {id}_{site}.tsv", id = p.id).unwrap();
    }
    writeln!(header, "#Age: {}", p.age.as_str()).unwrap();
    writeln!(header, "#Sex: {}", p.sex.as_str()).unwrap();
    writeln!(header, "#Pregnancy status: {}", if p.pregnant { "True" } else { "False" }).unwrap();
    writeln!(header, "#Murmur: {}", p.murmur.as_str()).unwrap();
    let locs = if p.murmur_locations.is_empty() {
        "nan".to_string()
    } else {
        p.murmur_locations
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join("+")
    };
    writeln!(header, "#Murmur locations: {locs}").unwrap();
    writeln!(header, "#Outcome: {}", p.outcome.as_str()).unwrap();

    let header_path = dir.join(format!("{}.txt", p.id));
    std::fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;

    for r in &p.recordings {
        let site = r.site.as_str();
        write_wav(&dir.join(format!("{}_{site}.wav", p.id)), &r.waveform)?;
        let mut tsv = String::new();
        for s in &r.segments {
            writeln!(tsv, "{:.6}\t{:.6}\t{}", s.start, s.end, s.state).unwrap();
        }
        let tsv_path = dir.join(format!("{}_{site}.tsv", p.id));
        std::fs::write(&tsv_path, tsv).map_err(|e| Error::io(&tsv_path, e))?;
    }
    Ok(())
}
