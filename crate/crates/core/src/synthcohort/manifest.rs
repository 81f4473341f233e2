use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    render_participant, CohortManifest, ParticipantRecord, RenderOptions, SynthError, VascularTruth, View, ViewEntry,
};
use crate::fsutil::write_atomic;
use crate::imgproc::{save_image, Roi};

pub const MANIFEST_HEADER: [&str; 9] =
    ["participant_id", "class_label", "fpg_mgdl", "view", "image_path", "roi_x", "roi_y", "roi_w", "roi_h"];
pub const TRUTH_HEADER: [&str; 5] =
    ["participant_id", "vessel_count", "tortuosity_px", "caliber_mean_px", "caliber_var_px2"];

#[derive(Serialize, Deserialize)]
struct CohortMeta {
    seed: u64,
    generator_version: String,
}

/// Writes `manifest.csv`, `truth.csv` and `cohort.json` into `dir`.
pub fn write_manifest(manifest: &CohortManifest, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    let mut records: Vec<&ParticipantRecord> = manifest.records.iter().collect();
    records.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in &records {
        for v in &r.views {
            w.write_record([
                r.participant_id.clone(),
                r.class_label.to_string(),
                r.fpg_mgdl.to_string(),
                v.view.to_string(),
                v.image_path.clone(),
                v.roi.x.to_string(),
                v.roi.y.to_string(),
                v.roi.w.to_string(),
                v.roi.h.to_string(),
            ])?;
        }
    }
    write_atomic(&dir.join("manifest.csv"), &w.into_inner().map_err(|e| e.into_error())?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRUTH_HEADER)?;
    for r in &records {
        let t = &r.truth;
        w.write_record([
            r.participant_id.clone(),
            t.vessel_count.to_string(),
            t.tortuosity_px.to_string(),
            t.caliber_mean_px.to_string(),
            t.caliber_var_px2.to_string(),
        ])?;
    }
    write_atomic(&dir.join("truth.csv"), &w.into_inner().map_err(|e| e.into_error())?)?;

    let meta = CohortMeta { seed: manifest.seed, generator_version: manifest.generator_version.clone() };
    let json = serde_json::to_vec_pretty(&meta).map_err(std::io::Error::other)?;
    write_atomic(&dir.join("cohort.json"), &json)?;
    Ok(())
}

/// Renders every participant's views to `dir/images/` and writes the manifest.
/// Participants listed in `corrupt` get a deliberately unusable straight view.
pub fn write_cohort(manifest: &CohortManifest, dir: &Path, corrupt: &[String]) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir.join("images"))?;
    for r in &manifest.records {
        let options = RenderOptions { corrupt: corrupt.contains(&r.participant_id) };
        let rendered = render_participant(r, manifest.seed, options);
        for (entry, img) in r.views.iter().zip(&rendered.images) {
            save_image(img, &dir.join(&entry.image_path))?;
        }
    }
    write_manifest(manifest, dir)
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T, SynthError> {
    field.parse().map_err(|_| SynthError::Schema(format!("line {line}: bad {what} {field:?}")))
}

fn check_header(reader: &mut csv::Reader<std::fs::File>, want: &[&str], file: &str) -> Result<(), SynthError> {
    let got = reader.headers()?;
    if got.iter().ne(want.iter().copied()) {
        return Err(SynthError::Schema(format!("{file} header {:?}, expected {want:?}", got.iter().collect::<Vec<_>>())));
    }
    Ok(())
}

/// Reads a cohort directory back, with records sorted by participant id.
pub fn read_manifest(dir: &Path) -> Result<CohortManifest, SynthError> {
    let meta: CohortMeta = serde_json::from_slice(&std::fs::read(dir.join("cohort.json"))?)
        .map_err(|e| SynthError::Schema(format!("cohort.json: {e}")))?;

    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
    check_header(&mut reader, &MANIFEST_HEADER, "manifest.csv")?;
    let mut partial: BTreeMap<String, (ParticipantRecord, Vec<Option<ViewEntry>>)> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row[0].to_string();
        let class_label = row[1].parse()?;
        let fpg_mgdl: f64 = parse(&row[2], "fpg_mgdl", line)?;
        let view: View = row[3].parse()?;
        let roi = Roi {
            x: parse(&row[5], "roi_x", line)?,
            y: parse(&row[6], "roi_y", line)?,
            w: parse(&row[7], "roi_w", line)?,
            h: parse(&row[8], "roi_h", line)?,
        };
        let entry = ViewEntry { view, image_path: row[4].to_string(), roi };
        let (rec, slots) = partial.entry(id.clone()).or_insert_with(|| {
            let truth = VascularTruth { vessel_count: 0, tortuosity_px: 0.0, caliber_mean_px: 0.0, caliber_var_px2: 0.0 };
            (ParticipantRecord { participant_id: id.clone(), class_label, fpg_mgdl, views: Vec::new(), truth }, vec![None; 5])
        });
        if rec.class_label != class_label || rec.fpg_mgdl != fpg_mgdl {
            return Err(SynthError::Schema(format!("{id}: class or glucose differs between rows")));
        }
        if slots[view.index()].replace(entry).is_some() {
            return Err(SynthError::Schema(format!("{id}: view {view} listed twice")));
        }
    }

    let mut reader = csv::Reader::from_path(dir.join("truth.csv"))?;
    check_header(&mut reader, &TRUTH_HEADER, "truth.csv")?;
    let mut truths: BTreeMap<String, VascularTruth> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let t = VascularTruth {
            vessel_count: parse(&row[1], "vessel_count", line)?,
            tortuosity_px: parse(&row[2], "tortuosity_px", line)?,
            caliber_mean_px: parse(&row[3], "caliber_mean_px", line)?,
            caliber_var_px2: parse(&row[4], "caliber_var_px2", line)?,
        };
        if truths.insert(row[0].to_string(), t).is_some() {
            return Err(SynthError::Schema(format!("truth.csv: duplicate id {}", &row[0])));
        }
    }

    let mut records = Vec::with_capacity(partial.len());
    for (id, (mut rec, slots)) in partial {
        let present = slots.iter().filter(|s| s.is_some()).count();
        if present != 5 {
            return Err(SynthError::Schema(format!("{id}: {present} views, expected 5")));
        }
        rec.views = slots.into_iter().flatten().collect();
        rec.truth = truths.remove(&id).ok_or_else(|| SynthError::Schema(format!("{id}: missing from truth.csv")))?;
        records.push(rec);
    }
    if let Some(id) = truths.keys().next() {
        return Err(SynthError::Schema(format!("truth.csv: {id} not in manifest")));
    }
    Ok(CohortManifest { records, seed: meta.seed, generator_version: meta.generator_version })
}
