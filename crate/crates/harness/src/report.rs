//! Report writers: CSV tables, the JSON summary and local-map images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use licw_core::analysis::LocalMaps;
use serde_json::{json, Map, Value};

use crate::error::{io_err, Result};
use crate::suite::{ReportRow, SuiteBundle};

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub const REPORT_HEADER: &str = "method,image,family,lambda_index,lambda,gamma_r,gamma_d,rate,rate_adv,distortion,distortion_adv,delta_rate,delta_distortion,psnr,psnr_adv";

pub fn reports_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.image,
            r.family,
            r.lambda_index,
            r.lambda,
            r.gamma_r,
            r.gamma_d,
            r.rate,
            r.rate_adv,
            r.distortion,
            r.distortion_adv,
            r.delta_rate,
            r.delta_distortion,
            r.psnr,
            r.psnr_adv
        );
    }
    s
}

fn stats(rows: &[&ReportRow]) -> Value {
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ReportRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let (mr, md) = (mean(&|r| r.delta_rate), mean(&|r| r.delta_distortion));
    let sr = mean(&|r| (r.delta_rate - mr).powi(2)).sqrt();
    let sd = mean(&|r| (r.delta_distortion - md).powi(2)).sqrt();
    json!({ "count": rows.len(), "mean_delta_rate": mr, "mean_delta_distortion": md, "std_delta_rate": sr, "std_delta_distortion": sd })
}

fn grouped(rows: &[&ReportRow], key: impl Fn(&ReportRow) -> String) -> Value {
    let mut keys: Vec<String> = Vec::new();
    for r in rows {
        let k = key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut m = Map::new();
    for k in keys {
        let group: Vec<&ReportRow> = rows.iter().copied().filter(|r| key(r) == k).collect();
        m.insert(k, stats(&group));
    }
    Value::Object(m)
}

/// Per-method aggregates: all rows, per direction and per submodel.
pub fn summary(bundle: &SuiteBundle) -> Value {
    let mut methods: Vec<&str> = Vec::new();
    for r in &bundle.reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut per = Map::new();
    for m in methods {
        let rows: Vec<&ReportRow> = bundle.reports_for(m).collect();
        per.insert(
            m.to_string(),
            json!({
                "all": stats(&rows),
                "by_direction": grouped(&rows, |r| format!("({}, {})", r.gamma_r, r.gamma_d)),
                "by_submodel": grouped(&rows, |r| format!("{}/{}", r.family, r.lambda_index)),
            }),
        );
    }
    json!({
        "suite": bundle.name,
        "images": bundle.images,
        "failed_tasks": bundle.failures.len(),
        "methods": per,
    })
}

pub fn write_bundle(dir: &Path, b: &SuiteBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join("reports.csv"), &reports_csv(&b.reports))?;

    let mut s = String::from("task,method,max_rms,min_pixel,max_pixel,surface_steps,iterations,first_surface_iteration,lr_drop_ok,unstable,capped,ratio_clamped,rate_map_kurtosis,distortion_map_kurtosis\n");
    for a in &b.attacks {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.task,
            a.method,
            a.max_rms,
            a.min_pixel,
            a.max_pixel,
            a.surface_steps,
            a.iterations,
            a.first_surface_iteration.map(|v| v.to_string()).unwrap_or_default(),
            a.lr_drop_ok,
            a.unstable,
            a.capped,
            a.ratio_clamped,
            opt(a.rate_map_kurtosis),
            opt(a.distortion_map_kurtosis)
        );
    }
    write(&dir.join("attacks.csv"), &s)?;

    let mut s = String::from("image,family,lambda_index,gamma_r,gamma_d,interventions,delta_mean,scale,bitrate_z,bitrate_y,total,benign_total,adversarial_total\n");
    for e in &b.eci {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.image,
            e.family,
            e.lambda_index,
            e.gamma_r,
            e.gamma_d,
            e.interventions,
            opt(e.delta_mean),
            opt(e.scale),
            opt(e.bitrate_z),
            e.bitrate_y,
            e.total,
            e.benign_total,
            e.adversarial_total
        );
    }
    write(&dir.join("eci.csv"), &s)?;

    let mut s = String::from("image,family,lambda_index,kind,layer,interval,ldmr,cdmr\n");
    for l in &b.ldmr {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", l.image, l.family, l.lambda_index, l.kind, l.layer, l.interval, l.ldmr, l.cdmr);
    }
    write(&dir.join("ldmr.csv"), &s)?;

    let mut s = String::from("image,family,lambda_index,kind,final_cdmr,profile\n");
    for c in &b.cdmr {
        let _ = writeln!(s, "{},{},{},{},{},{}", c.image, c.family, c.lambda_index, c.kind, c.final_cdmr, c.profile);
    }
    write(&dir.join("cdmr.csv"), &s)?;

    let mut s = String::from("image,family,lambda_index,gamma_r,gamma_d,iteration,loss,best\n");
    for t in &b.trajectories {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", t.image, t.family, t.lambda_index, t.gamma_r, t.gamma_d, t.iteration, t.loss, t.best);
    }
    write(&dir.join("online_trajectory.csv"), &s)?;

    let mut s = String::from("task,error\n");
    for (task, err) in &b.failures {
        let _ = writeln!(s, "{task},{:?}", err);
    }
    write(&dir.join("failures.csv"), &s)?;

    let text = serde_json::to_string_pretty(&summary(b))?;
    write(&dir.join("summary.json"), &text)
}

/// Row-major grid as whitespace-separated text, one row per line.
pub fn grid_text(values: &[f64], width: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Binary PGM with zero at mid-gray and the largest magnitude at 0 or 255.
pub fn diverging_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| if peak > 0.0 { (127.5 + 127.5 * v / peak).round().clamp(0.0, 255.0) as u8 } else { 128 }));
    out
}

pub fn write_maps(dir: &Path, id: &str, maps: &LocalMaps) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (rh, rw) = maps.rate_dims;
    let (dh, dw) = maps.distortion_dims;
    write(&dir.join(format!("{id}_rate.txt")), &grid_text(&maps.rate, rw))?;
    write(&dir.join(format!("{id}_distortion.txt")), &grid_text(&maps.distortion, dw))?;
    let p = dir.join(format!("{id}_rate.pgm"));
    fs::write(&p, diverging_pgm(&maps.rate, rw, rh)).map_err(io_err(&p))?;
    let p = dir.join(format!("{id}_distortion.pgm"));
    fs::write(&p, diverging_pgm(&maps.distortion, dw, dh)).map_err(io_err(&p))
}
