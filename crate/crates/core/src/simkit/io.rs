//! Cohort persistence: a padded per-step CSV, a key-value metadata sidecar,
//! and a generator-state sidecar that lets a separate process answer
//! counterfactual queries.
//!
//! Floats are written with Rust's shortest round-trip formatting, so files
//! are byte-stable across runs and parse back exactly.

use super::trajectory::{Cohort, CohortMeta, SimState, Trajectory};
use super::SimError;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn cohort_csv_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

pub fn meta_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.meta.txt"))
}

pub fn simstate_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.simstate.csv"))
}

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn fmt_f64(x: f64) -> String {
    // `{}` on f64 prints the shortest representation that round-trips.
    format!("{x}")
}

pub fn write_cohort(dir: &Path, name: &str, cohort: &Cohort, fingerprint: &str) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(SimError::Io)?;
    let meta = &cohort.meta;

    let mut csv = String::new();
    csv.push_str("unit_id,t,active,w,y");
    for i in 0..meta.d_x {
        csv.push_str(&format!(",x_{i}"));
    }
    for i in 0..meta.d_v {
        csv.push_str(&format!(",v_{i}"));
    }
    csv.push('\n');
    for tr in &cohort.trajectories {
        for t in 0..meta.max_len {
            let active = t < tr.active_len;
            csv.push_str(&format!("{},{},{}", tr.unit_id, t + 1, active as u8));
            if active {
                csv.push_str(&format!(",{},{}", tr.treatments[t], fmt_f64(tr.outcomes[t])));
                for x in &tr.covariates[t] {
                    csv.push(',');
                    csv.push_str(&fmt_f64(*x));
                }
            } else {
                csv.push_str(",0,0");
                for _ in 0..meta.d_x {
                    csv.push_str(",0");
                }
            }
            for v in &tr.statics {
                csv.push(',');
                csv.push_str(&fmt_f64(*v));
            }
            csv.push('\n');
        }
    }
    write_atomic(&cohort_csv_path(dir, name), &csv).map_err(SimError::Io)?;

    let mut kv = String::new();
    kv.push_str(&format!("generator = {}\n", meta.generator));
    kv.push_str(&format!("seed = {}\n", meta.seed));
    kv.push_str(&format!("n_units = {}\n", cohort.trajectories.len()));
    kv.push_str(&format!("d_x = {}\n", meta.d_x));
    kv.push_str(&format!("d_v = {}\n", meta.d_v));
    kv.push_str(&format!("k_treatments = {}\n", meta.k_treatments));
    kv.push_str(&format!("max_len = {}\n", meta.max_len));
    kv.push_str(&format!("y_scale = {}\n", fmt_f64(meta.y_scale)));
    kv.push_str(&format!(
        "x_scales = {}\n",
        meta.x_scales.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
    ));
    kv.push_str(&format!("overlap_violations = {}\n", meta.overlap_violations));
    kv.push_str(&format!("fingerprint = {fingerprint}\n"));
    for (k, v) in &meta.config_kv {
        kv.push_str(&format!("cfg.{k} = {v}\n"));
    }
    write_atomic(&meta_path(dir, name), &kv).map_err(SimError::Io)?;

    let mut ss = String::from("unit_id,kind,idx,name,value\n");
    for tr in &cohort.trajectories {
        if let Some(state) = &tr.sim_state {
            for (k, v) in &state.params {
                ss.push_str(&format!("{},param,0,{},{}\n", tr.unit_id, k, fmt_f64(*v)));
            }
            for (t, row) in state.steps.iter().enumerate() {
                for (name, v) in state.step_names.iter().zip(row) {
                    ss.push_str(&format!("{},step,{},{},{}\n", tr.unit_id, t, name, fmt_f64(*v)));
                }
            }
        }
    }
    write_atomic(&simstate_path(dir, name), &ss).map_err(SimError::Io)?;
    Ok(())
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

fn kv_req<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, SimError> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| SimError::BadFile(format!("metadata missing key {key}")))
}

pub fn read_cohort(dir: &Path, name: &str) -> Result<(Cohort, String), SimError> {
    let meta_text = fs::read_to_string(meta_path(dir, name)).map_err(SimError::Io)?;
    let kv = parse_kv(&meta_text);
    let d_x: usize = kv_req(&kv, "d_x")?.parse().map_err(|_| bad("d_x"))?;
    let d_v: usize = kv_req(&kv, "d_v")?.parse().map_err(|_| bad("d_v"))?;
    let max_len: usize = kv_req(&kv, "max_len")?.parse().map_err(|_| bad("max_len"))?;
    let meta = CohortMeta {
        generator: kv_req(&kv, "generator")?.to_string(),
        seed: kv_req(&kv, "seed")?.parse().map_err(|_| bad("seed"))?,
        d_x,
        d_v,
        k_treatments: kv_req(&kv, "k_treatments")?.parse().map_err(|_| bad("k_treatments"))?,
        max_len,
        y_scale: kv_req(&kv, "y_scale")?.parse().map_err(|_| bad("y_scale"))?,
        x_scales: kv_req(&kv, "x_scales")?
            .split(';')
            .map(|s| s.parse().map_err(|_| bad("x_scales")))
            .collect::<Result<_, _>>()?,
        overlap_violations: kv_req(&kv, "overlap_violations")?.parse().map_err(|_| bad("overlap_violations"))?,
        config_kv: kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("cfg.").map(|k| (k.to_string(), v.clone())))
            .collect(),
    };
    let fingerprint = kv_req(&kv, "fingerprint")?.to_string();

    let csv = fs::read_to_string(cohort_csv_path(dir, name)).map_err(SimError::Io)?;
    let mut units: BTreeMap<u64, Trajectory> = BTreeMap::new();
    let mut order: Vec<u64> = Vec::new();
    for (ln, line) in csv.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + d_x + d_v {
            return Err(SimError::BadFile(format!("row {ln}: {} fields", fields.len())));
        }
        let unit_id: u64 = fields[0].parse().map_err(|_| bad("unit_id"))?;
        let active = fields[2] == "1";
        let tr = units.entry(unit_id).or_insert_with(|| {
            order.push(unit_id);
            Trajectory {
                unit_id,
                statics: fields[5 + d_x..].iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect(),
                covariates: vec![],
                treatments: vec![],
                outcomes: vec![],
                active_len: 0,
                sim_state: None,
            }
        });
        if active {
            tr.treatments.push(fields[3].parse().map_err(|_| bad("w"))?);
            tr.outcomes.push(fields[4].parse().map_err(|_| bad("y"))?);
            tr.covariates.push(
                fields[5..5 + d_x]
                    .iter()
                    .map(|s| s.parse().map_err(|_| bad("x")))
                    .collect::<Result<_, _>>()?,
            );
            tr.active_len += 1;
        }
    }

    // Generator state sidecar is optional on read.
    if let Ok(ss) = fs::read_to_string(simstate_path(dir, name)) {
        let mut states: BTreeMap<u64, SimState> = BTreeMap::new();
        for line in ss.lines().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(5, ',').collect();
            if fields.len() != 5 {
                return Err(SimError::BadFile("simstate row malformed".into()));
            }
            let unit_id: u64 = fields[0].parse().map_err(|_| bad("simstate unit"))?;
            let idx: usize = fields[2].parse().map_err(|_| bad("simstate idx"))?;
            let name = fields[3];
            let value: f64 = fields[4].parse().map_err(|_| bad("simstate value"))?;
            let state = states.entry(unit_id).or_default();
            match fields[1] {
                "param" => {
                    state.params.insert(name.to_string(), value);
                }
                "step" => {
                    let col = match state.step_names.iter().position(|n| n == name) {
                        Some(c) => c,
                        None => {
                            state.step_names.push(name.to_string());
                            state.step_names.len() - 1
                        }
                    };
                    if state.steps.len() <= idx {
                        state.steps.resize(idx + 1, vec![]);
                    }
                    let row = &mut state.steps[idx];
                    if row.len() <= col {
                        row.resize(col + 1, f64::NAN);
                    }
                    row[col] = value;
                }
                other => return Err(SimError::BadFile(format!("simstate kind {other}"))),
            }
        }
        for (unit_id, state) in states {
            if let Some(tr) = units.get_mut(&unit_id) {
                tr.sim_state = Some(state);
            }
        }
    }

    let trajectories = order.into_iter().map(|id| units.remove(&id).unwrap()).collect();
    Ok((Cohort { meta, trajectories }, fingerprint))
}

fn bad(field: &str) -> SimError {
    SimError::BadFile(format!("unparseable field {field}"))
}

/// FNV-64 content hash of a file, hex-encoded; recorded in run manifests.
pub fn file_content_hash(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:016x}", super::rng::fnv64(&bytes)))
}
