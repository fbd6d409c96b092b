//! Figure data files.
//!
//! | file | columns |
//! |------|---------|
//! | `rd_curve.csv` | family, lambda_index, bpp_pre, psnr_pre, bpp_post, psnr_post, direction |
//! | `delta_scatter.csv` | method, family, lambda_index, direction, image, delta_rate, delta_distortion |
//! | `ldmr_bars.csv` | family, lambda_index, kind, layer, ldmr, cdmr |
//! | `defense_trajectory.csv` | family, lambda_index, direction, image, iteration, loss, best |
//!
//! Per-image values are averaged within each group; `direction` is written
//! as `gamma_r:gamma_d`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_err, HarnessError, Result};
use crate::suite::SuiteBundle;

fn direction(r: f64, d: f64) -> String {
    format!("{r}:{d}")
}

/// Keys in first-seen order with the rows belonging to each.
fn groups<'a, T, K: PartialEq + Clone>(rows: impl Iterator<Item = &'a T>, key: impl Fn(&T) -> K) -> Vec<(K, Vec<&'a T>)>
where
    T: 'a,
{
    let mut out: Vec<(K, Vec<&'a T>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match out.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => out.push((k, vec![r])),
        }
    }
    out
}

fn mean<T>(rows: &[&T], f: impl Fn(&T) -> f64) -> f64 {
    rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
}

/// Writes the figure files into `dir` and returns their paths.
pub fn emit_plotdata(bundle: &SuiteBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    if bundle.reports_for("SRDA").next().is_none() {
        return Err(HarnessError::Incomplete("no SRDA reports".into()));
    }
    if bundle.ldmr_requested && bundle.ldmr.is_empty() {
        return Err(HarnessError::Incomplete("magnification profiles were requested but none completed".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))?;
        written.push(p);
        Ok(())
    };

    let mut s = String::from("family,lambda_index,bpp_pre,psnr_pre,bpp_post,psnr_post,direction\n");
    for ((family, idx, gr, gd), rows) in groups(bundle.reports_for("SRDA"), |r| (r.family.clone(), r.lambda_index, r.gamma_r.to_bits(), r.gamma_d.to_bits())) {
        let _ = writeln!(
            s,
            "{family},{idx},{},{},{},{},{}",
            mean(&rows, |r| r.rate),
            mean(&rows, |r| r.psnr),
            mean(&rows, |r| r.rate_adv),
            mean(&rows, |r| r.psnr_adv),
            direction(f64::from_bits(gr), f64::from_bits(gd))
        );
    }
    put("rd_curve.csv", s)?;

    let mut s = String::from("method,family,lambda_index,direction,image,delta_rate,delta_distortion\n");
    for r in &bundle.reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method,
            r.family,
            r.lambda_index,
            direction(r.gamma_r, r.gamma_d),
            r.image,
            r.delta_rate,
            r.delta_distortion
        );
    }
    put("delta_scatter.csv", s)?;

    let mut s = String::from("family,lambda_index,kind,layer,ldmr,cdmr\n");
    for ((family, idx, kind, layer), rows) in groups(bundle.ldmr.iter(), |l| (l.family.clone(), l.lambda_index, l.kind.clone(), l.layer.clone())) {
        let _ = writeln!(s, "{family},{idx},{kind},{layer},{},{}", mean(&rows, |l| l.ldmr), mean(&rows, |l| l.cdmr));
    }
    put("ldmr_bars.csv", s)?;

    let mut s = String::from("family,lambda_index,direction,image,iteration,loss,best\n");
    for t in &bundle.trajectories {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            t.family,
            t.lambda_index,
            direction(t.gamma_r, t.gamma_d),
            t.image,
            t.iteration,
            t.loss,
            t.best
        );
    }
    put("defense_trajectory.csv", s)?;
    Ok(written)
}
