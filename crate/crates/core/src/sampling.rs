//! Random pose generation, RMSD labeling and pose datasets.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Target;
use crate::error::{contract, Error, Result};
use crate::molecule::{bounding_box, centroid, rmsd, uniform_random_rotation, ConformationDof, Ligand, Vec3};
use crate::network::BinaryLabel;
use crate::pipeline::histogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseLabel {
    Binding,
    Ambiguous,
    NonBinding,
}

impl PoseLabel {
    /// Training label; ambiguous poses are not trained on.
    pub fn training_label(self) -> Option<BinaryLabel> {
        match self {
            PoseLabel::Binding => Some(BinaryLabel::Binding),
            PoseLabel::NonBinding => Some(BinaryLabel::NonBinding),
            PoseLabel::Ambiguous => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoseLabel::Binding => "binding",
            PoseLabel::Ambiguous => "ambiguous",
            PoseLabel::NonBinding => "non-binding",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelThresholds {
    /// Poses strictly below this RMSD (Å) are binding.
    pub binding_max: f64,
    /// Poses strictly above this RMSD (Å) are non-binding.
    pub nonbinding_min: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self { binding_max: 2.0, nonbinding_min: 4.0 }
    }
}

impl LabelThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.binding_max >= 0.0 && self.binding_max < self.nonbinding_min) {
            return Err(Error::Config(format!(
                "label thresholds need 0 <= binding_max < nonbinding_min, got {} and {}",
                self.binding_max, self.nonbinding_min
            )));
        }
        Ok(())
    }
}

pub fn label_pose(rmsd: f64, thresholds: &LabelThresholds) -> Result<PoseLabel> {
    if !(rmsd >= 0.0) {
        return Err(contract(format!("rmsd must be non-negative, got {rmsd}")));
    }
    Ok(if rmsd < thresholds.binding_max {
        PoseLabel::Binding
    } else if rmsd > thresholds.nonbinding_min {
        PoseLabel::NonBinding
    } else {
        PoseLabel::Ambiguous
    })
}

/// One pose of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub target_id: String,
    pub pose_index: usize,
    pub dof: ConformationDof,
    pub rmsd: f64,
    pub label: PoseLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Where the pose came from, e.g. `random` or `optimized-round-1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

impl PoseRecord {
    pub fn pose_id(&self) -> String {
        format!("{}/{}", self.target_id, self.pose_index)
    }
}

/// Uniformly random pose: torsions in [-π, π), a uniform orientation, and a
/// translation placing the posed centroid uniformly in the crystal pose's
/// bounding box.
pub fn sample_random_pose<R: Rng + ?Sized>(ligand: &Ligand, crystal_coords: &[Vec3], rng: &mut R) -> Result<ConformationDof> {
    if crystal_coords.len() != ligand.len() {
        return Err(contract("crystal pose and ligand differ in atom count"));
    }
    let bb = bounding_box(crystal_coords, 0.0)?;
    let pi = std::f64::consts::PI;
    let torsions: Vec<f64> = (0..ligand.torsion_count()).map(|_| rng.random_range(-pi..pi)).collect();
    let rotation = uniform_random_rotation(rng).scaled_axis();
    let target = Vec3::from_fn(|k, _| {
        if bb.max[k] > bb.min[k] {
            rng.random_range(bb.min[k]..=bb.max[k])
        } else {
            bb.min[k]
        }
    });
    let mut dof = ConformationDof { translation: Vec3::zeros(), rotation, torsions };
    let unshifted = centroid(&ligand.apply_dof(&dof)?)?;
    dof.translation = target - unshifted;
    Ok(dof)
}

/// Perturb `base` by a random translation of length up to `max_translation`,
/// a rotation by up to `max_angle` about a random axis (composed on the left),
/// and torsion offsets in `±max_torsion`.
pub fn perturb_pose<R: Rng + ?Sized>(
    base: &ConformationDof,
    max_translation: f64,
    max_angle: f64,
    max_torsion: f64,
    rng: &mut R,
) -> ConformationDof {
    let random_unit = |rng: &mut R| loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let shift = random_unit(rng) * rng.random_range(0.0..=max_translation);
    let axis = random_unit(rng);
    let angle = rng.random_range(0.0..=max_angle);
    let delta = nalgebra::UnitQuaternion::from_scaled_axis(axis * angle);
    let rotation = (delta * nalgebra::UnitQuaternion::from_scaled_axis(base.rotation)).scaled_axis();
    let torsions = base
        .torsions
        .iter()
        .map(|t| t + if max_torsion > 0.0 { rng.random_range(-max_torsion..=max_torsion) } else { 0.0 })
        .collect();
    ConformationDof { translation: base.translation + shift, rotation, torsions }
}

pub fn make_record(
    target: &Target,
    pose_index: usize,
    dof: ConformationDof,
    thresholds: &LabelThresholds,
    origin: Option<&str>,
) -> Result<PoseRecord> {
    let coords = target.ligand.apply_dof(&dof)?;
    let r = rmsd(&coords, &target.crystal_coords())?;
    Ok(PoseRecord {
        target_id: target.id.clone(),
        pose_index,
        dof,
        rmsd: r,
        label: label_pose(r, thresholds)?,
        score: None,
        origin: origin.map(str::to_string),
    })
}

/// Random generator for target `index` of a run seeded with `seed`.
pub fn target_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `per_target` random poses for every target, in target order.
pub fn generate_random_set(targets: &[Target], per_target: usize, seed: u64, thresholds: &LabelThresholds) -> Result<Vec<PoseRecord>> {
    if per_target == 0 {
        return Err(contract("per_target must be at least 1"));
    }
    let sets: Vec<Vec<PoseRecord>> = targets
        .par_iter()
        .enumerate()
        .map(|(ti, target)| {
            let mut rng = target_rng(seed, ti);
            let crystal = target.crystal_coords();
            (0..per_target)
                .map(|i| {
                    let dof = sample_random_pose(&target.ligand, &crystal, &mut rng)?;
                    make_record(target, i, dof, thresholds, Some("random"))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(sets.into_iter().flatten().collect())
}

pub fn write_dataset<W: Write>(records: &[PoseRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a dataset, checking every label against its RMSD.
pub fn read_dataset<R: BufRead>(r: R, thresholds: &LabelThresholds) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::FormatAtLine { line: i + 1, message };
        let rec: PoseRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let expected = label_pose(rec.rmsd, thresholds).map_err(|e| at(e.to_string()))?;
        if expected != rec.label {
            return Err(at(format!(
                "label {} contradicts rmsd {} (expected {})",
                rec.label.as_str(),
                rec.rmsd,
                expected.as_str()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_dataset(records: &[PoseRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<std::path::Path>, thresholds: &LabelThresholds) -> Result<Vec<PoseRecord>> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?), thresholds)
}

/// RMSD histogram rows `bin_lo,bin_hi,count,source_set` for each named set.
pub fn rmsd_histogram_csv(sets: &[(&str, &[PoseRecord])], bin_width: f64) -> Result<String> {
    let mut s = String::from("bin_lo,bin_hi,count,source_set\n");
    for (name, records) in sets {
        let values: Vec<f64> = records.iter().map(|r| r.rmsd).collect();
        for bin in histogram(&values, bin_width)? {
            writeln!(s, "{},{},{},{}", bin.lo, bin.hi, bin.count, name).unwrap();
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_strict_thresholds() {
        let t = LabelThresholds::default();
        assert_eq!(label_pose(1.9, &t).unwrap(), PoseLabel::Binding);
        assert_eq!(label_pose(3.0, &t).unwrap(), PoseLabel::Ambiguous);
        assert_eq!(label_pose(2.0, &t).unwrap(), PoseLabel::Ambiguous);
        assert_eq!(label_pose(4.0, &t).unwrap(), PoseLabel::Ambiguous);
        assert_eq!(label_pose(4.0001, &t).unwrap(), PoseLabel::NonBinding);
        assert_eq!(label_pose(0.0, &t).unwrap(), PoseLabel::Binding);
        assert!(label_pose(-0.1, &t).is_err());
    }

    #[test]
    fn empty_dataset() {
        let recs = read_dataset(&b""[..], &LabelThresholds::default()).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn contradictory_label_reports_line() {
        let good = PoseRecord {
            target_id: "t".into(),
            pose_index: 0,
            dof: ConformationDof::zero(0),
            rmsd: 1.0,
            label: PoseLabel::Binding,
            score: None,
            origin: None,
        };
        let bad = PoseRecord { label: PoseLabel::NonBinding, ..good.clone() };
        let mut buf = Vec::new();
        write_dataset(&[good, bad], &mut buf).unwrap();
        match read_dataset(&buf[..], &LabelThresholds::default()) {
            Err(Error::FormatAtLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_dataset(&b"{not json\n"[..], &LabelThresholds::default()),
            Err(Error::FormatAtLine { line: 1, .. })
        ));
    }
}
