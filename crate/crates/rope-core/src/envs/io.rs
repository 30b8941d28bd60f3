//! CSV import/export for bandit datasets and logged trajectories.
//!
//! Floats are written in Rust's shortest round-tripping decimal form, so a
//! write/read cycle reproduces every value bit for bit.

use std::path::Path;

use super::EnvError;
use crate::cb::{CbDataset, CbPolicy, CbSample};
use crate::mdp::{Step, TrajectoryBatch};

/// Maps dataset fields to CSV column names.
///
/// `covariates` lists every covariate column in the order that defines the
/// full covariate vector; `shift_subset` names the columns whose marginal
/// the evaluation treats as shifted (a subset of `covariates`). The
/// propensity column holds the logged probability of the recorded action
/// and is mandatory for loading: off-policy estimates are undefined
/// without it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub covariates: Vec<String>,
    pub shift_subset: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    pub propensity: Option<String>,
}

impl CsvSchema {
    /// Schema of the synthetic bandit domain.
    pub fn synthetic_cb() -> Self {
        Self {
            covariates: vec!["z1".into(), "z2".into()],
            shift_subset: vec!["z1".into()],
            treatment: "t".into(),
            outcome: "y".into(),
            propensity: Some("propensity".into()),
        }
    }

    /// Indices of the shift columns within the covariate list.
    fn shift_indices(&self) -> Result<Vec<usize>, EnvError> {
        if self.covariates.is_empty() {
            return Err(EnvError::SchemaViolation {
                reason: "schema lists no covariate columns".into(),
            });
        }
        for (i, name) in self.covariates.iter().enumerate() {
            if self.covariates[..i].contains(name) {
                return Err(EnvError::SchemaViolation {
                    reason: format!("duplicate covariate column {name:?}"),
                });
            }
        }
        self.shift_subset
            .iter()
            .map(|name| {
                self.covariates.iter().position(|c| c == name).ok_or_else(|| {
                    EnvError::SchemaViolation {
                        reason: format!("shift column {name:?} is not a covariate column"),
                    }
                })
            })
            .collect()
    }
}

/// Writes a bandit dataset, including the behavior propensity of each
/// logged action when the schema names a propensity column.
pub fn write_cb_csv(
    path: impl AsRef<Path>,
    data: &CbDataset,
    schema: &CsvSchema,
) -> Result<(), EnvError> {
    let shift_indices = schema.shift_indices()?;
    if shift_indices != data.shift_subset() {
        return Err(EnvError::SchemaViolation {
            reason: format!(
                "schema shift columns map to indices {:?} but the dataset shifts {:?}",
                shift_indices,
                data.shift_subset()
            ),
        });
    }
    if schema.covariates.len() != data.covariate_dim() {
        return Err(EnvError::SchemaViolation {
            reason: format!(
                "schema lists {} covariate columns but the dataset has {}",
                schema.covariates.len(),
                data.covariate_dim()
            ),
        });
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = schema.covariates.iter().map(String::as_str).collect();
    header.push(&schema.treatment);
    header.push(&schema.outcome);
    if let Some(name) = &schema.propensity {
        header.push(name);
    }
    writer.write_record(&header)?;
    for (i, sample) in data.samples().iter().enumerate() {
        let context = data.context(i);
        let mut record: Vec<String> = context.iter().map(f64::to_string).collect();
        record.push(sample.t.to_string());
        record.push(sample.y.to_string());
        if schema.propensity.is_some() {
            let p = data.behavior().propensity(i, &context, sample.t)?;
            record.push(p.to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads a bandit dataset. The behavior policy becomes the logged
/// propensities; rows with a propensity outside (0, 1] are rejected.
pub fn load_cb_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<CbDataset, EnvError> {
    let shift_indices = schema.shift_indices()?;
    let propensity_name = schema
        .propensity
        .as_ref()
        .ok_or(EnvError::MissingPropensityColumn)?;
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, EnvError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EnvError::MissingColumn { name: name.into() })
    };
    let covariate_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|n| col(n))
        .collect::<Result<_, _>>()?;
    let treatment_col = col(&schema.treatment)?;
    let outcome_col = col(&schema.outcome)?;
    let propensity_col = col(propensity_name)?;

    let parse = |row: usize, column: &str, content: &str| -> Result<f64, EnvError> {
        match content.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(EnvError::NonNumericCell {
                row,
                column: column.into(),
                content: content.into(),
            }),
        }
    };
    let mut samples = Vec::new();
    let mut propensities = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_idx + 1;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let full: Vec<f64> = covariate_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse(row, name, cell(c)))
            .collect::<Result<_, _>>()?;
        let t_raw = cell(treatment_col);
        let t: usize = t_raw.trim().parse().map_err(|_| EnvError::NonNumericCell {
            row,
            column: schema.treatment.clone(),
            content: t_raw.into(),
        })?;
        let y = parse(row, &schema.outcome, cell(outcome_col))?;
        let p = parse(row, propensity_name, cell(propensity_col))?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(EnvError::InvalidPropensity { row, value: p });
        }
        let z: Vec<f64> = shift_indices.iter().map(|&i| full[i]).collect();
        let x_rest: Vec<f64> = (0..full.len())
            .filter(|i| !shift_indices.contains(i))
            .map(|i| full[i])
            .collect();
        samples.push(CbSample { z, x_rest, t, y });
        propensities.push(p);
    }
    let behavior = CbPolicy::ExplicitPropensity { propensities };
    Ok(CbDataset::new(samples, behavior, shift_indices)?)
}

/// Writes logged episodes as `episode_id,state,action,reward,next_state`.
pub fn write_trajectories_csv(
    path: impl AsRef<Path>,
    batch: &TrajectoryBatch,
) -> Result<(), EnvError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["episode_id", "state", "action", "reward", "next_state"])?;
    for (episode_id, episode) in batch.episodes.iter().enumerate() {
        for step in episode {
            writer.write_record(&[
                episode_id.to_string(),
                step.state.to_string(),
                step.action.to_string(),
                step.reward.to_string(),
                step.next_state.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Loads logged episodes written by [`write_trajectories_csv`]. Steps with
/// the same episode id form one episode, in file order; the behavior
/// policy is not stored in the file and comes back as `None`.
pub fn load_trajectories_csv(path: impl AsRef<Path>) -> Result<TrajectoryBatch, EnvError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    for name in ["episode_id", "state", "action", "reward", "next_state"] {
        if !headers.iter().any(|h| h == name) {
            return Err(EnvError::MissingColumn { name: name.into() });
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name).expect("checked");
    let cols = [
        col("episode_id"),
        col("state"),
        col("action"),
        col("reward"),
        col("next_state"),
    ];
    let mut episodes: Vec<Vec<Step>> = Vec::new();
    let mut current_id: Option<u64> = None;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_idx + 1;
        let parse_int = |c: usize, column: &str| -> Result<u64, EnvError> {
            let content = record.get(c).unwrap_or("");
            content.trim().parse().map_err(|_| EnvError::NonNumericCell {
                row,
                column: column.into(),
                content: content.into(),
            })
        };
        let episode_id = parse_int(cols[0], "episode_id")?;
        let state = parse_int(cols[1], "state")? as usize;
        let action = parse_int(cols[2], "action")? as usize;
        let next_state = parse_int(cols[4], "next_state")? as usize;
        let reward_raw = record.get(cols[3]).unwrap_or("");
        let reward: f64 = match reward_raw.trim().parse() {
            Ok(v) => v,
            Err(_) => {
                return Err(EnvError::NonNumericCell {
                    row,
                    column: "reward".into(),
                    content: reward_raw.into(),
                })
            }
        };
        if current_id != Some(episode_id) {
            episodes.push(Vec::new());
            current_id = Some(episode_id);
        }
        episodes
            .last_mut()
            .expect("episode pushed")
            .push(Step { state, action, reward, next_state });
    }
    Ok(TrajectoryBatch::new(episodes))
}

#[cfg(test)]
mod tests {
    use super::super::{
        generate_synthetic_cb, sample_trajectories, synthetic_cb_target, StartDistribution,
        SyntheticCbConfig,
    };
    use super::*;
    use crate::cb::importance_weights;
    use crate::mdp::{TabularMdp, TabularPolicy};

    fn temp_csv(name: &str) -> tempfile::TempPath {
        tempfile::Builder::new()
            .prefix(name)
            .suffix(".csv")
            .tempfile()
            .expect("temp file")
            .into_temp_path()
    }

    #[test]
    fn cb_round_trip_is_bitwise_exact() {
        let config = SyntheticCbConfig { n: 60, delta0: 0.4, beta0: -1.0, seed: 9 };
        let data = generate_synthetic_cb(&config).unwrap();
        let schema = CsvSchema::synthetic_cb();
        let path = temp_csv("cb_roundtrip");
        write_cb_csv(&path, &data, &schema).unwrap();
        let loaded = load_cb_csv(&path, &schema).unwrap();
        assert_eq!(loaded.shift_subset(), data.shift_subset());
        for (a, b) in loaded.samples().iter().zip(data.samples()) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z[0].to_bits(), b.z[0].to_bits());
            assert_eq!(a.x_rest[0].to_bits(), b.x_rest[0].to_bits());
        }
        // Loaded propensities reproduce the logistic behavior exactly, so
        // importance weights agree bit for bit.
        let target = synthetic_cb_target(-0.5);
        let w_orig = importance_weights(&data, &target).unwrap();
        let w_loaded = importance_weights(&loaded, &target).unwrap();
        for (a, b) in w_loaded.iter().zip(&w_orig) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shift_columns_map_to_covariate_indices() {
        let path = temp_csv("cb_shift_map");
        std::fs::write(
            &path,
            "z1,z2,t,y,propensity\n1.5,2.5,0,0.25,0.5\n-1.0,4.0,1,1.25,0.25\n",
        )
        .unwrap();
        let schema = CsvSchema {
            covariates: vec!["z1".into(), "z2".into()],
            shift_subset: vec!["z2".into()],
            treatment: "t".into(),
            outcome: "y".into(),
            propensity: Some("propensity".into()),
        };
        let data = load_cb_csv(&path, &schema).unwrap();
        assert_eq!(data.shift_subset(), &[1]);
        assert_eq!(data.samples()[0].z, vec![2.5]);
        assert_eq!(data.samples()[0].x_rest, vec![1.5]);
        assert_eq!(data.context(1), vec![-1.0, 4.0]);
    }

    #[test]
    fn missing_column_error_names_the_column() {
        let path = temp_csv("cb_missing");
        std::fs::write(&path, "z1,z2,t,propensity\n1.0,2.0,0,0.5\n").unwrap();
        let err = load_cb_csv(&path, &CsvSchema::synthetic_cb()).unwrap_err();
        assert!(matches!(err, EnvError::MissingColumn { ref name } if name == "y"));
    }

    #[test]
    fn loading_without_a_propensity_column_is_refused() {
        let path = temp_csv("cb_noprop");
        std::fs::write(&path, "z1,z2,t,y\n1.0,2.0,0,0.5\n").unwrap();
        let schema = CsvSchema {
            propensity: None,
            ..CsvSchema::synthetic_cb()
        };
        let err = load_cb_csv(&path, &schema).unwrap_err();
        assert!(matches!(err, EnvError::MissingPropensityColumn));
        assert!(err.to_string().contains("propensit"));
    }

    #[test]
    fn zero_propensity_is_rejected_with_its_row() {
        let path = temp_csv("cb_zeroprop");
        std::fs::write(
            &path,
            "z1,z2,t,y,propensity\n1.0,2.0,0,0.5,0.5\n1.0,2.0,1,0.5,0.0\n",
        )
        .unwrap();
        let err = load_cb_csv(&path, &CsvSchema::synthetic_cb()).unwrap_err();
        assert!(
            matches!(err, EnvError::InvalidPropensity { row: 2, value } if value == 0.0),
            "{err}"
        );
    }

    #[test]
    fn non_numeric_cell_is_located() {
        let path = temp_csv("cb_nonnum");
        std::fs::write(
            &path,
            "z1,z2,t,y,propensity\n1.0,2.0,0,0.5,0.5\n1.0,oops,1,0.5,0.5\n",
        )
        .unwrap();
        let err = load_cb_csv(&path, &CsvSchema::synthetic_cb()).unwrap_err();
        assert!(
            matches!(
                err,
                EnvError::NonNumericCell { row: 2, ref column, .. } if column == "z2"
            ),
            "{err}"
        );
    }

    #[test]
    fn schema_rejects_unknown_shift_column() {
        let schema = CsvSchema {
            shift_subset: vec!["z9".into()],
            ..CsvSchema::synthetic_cb()
        };
        let path = temp_csv("cb_badschema");
        std::fs::write(&path, "z1,z2,t,y,propensity\n1.0,2.0,0,0.5,0.5\n").unwrap();
        assert!(matches!(
            load_cb_csv(&path, &schema),
            Err(EnvError::SchemaViolation { .. })
        ));
    }

    #[test]
    fn trajectory_round_trip_preserves_every_step() {
        let mdp = TabularMdp::new(
            3,
            2,
            vec![
                0.5, 0.5, 0.0, 0.0, 0.5, 0.5, //
                0.2, 0.3, 0.5, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0, 1.0,
            ],
            vec![0.125, -1.5, 2.0, 0.0, 1.0, -0.3],
            0.9,
            vec![false, false, false],
        )
        .unwrap();
        let policy = TabularPolicy::uniform(3, 2);
        let batch =
            sample_trajectories(&mdp, &policy, 7, 4, StartDistribution::Uniform, 23).unwrap();
        let path = temp_csv("traj_roundtrip");
        write_trajectories_csv(&path, &batch).unwrap();
        let loaded = load_trajectories_csv(&path).unwrap();
        assert_eq!(loaded.episodes, batch.episodes);
        assert!(loaded.behavior.is_none());
    }

    #[test]
    fn trajectory_csv_requires_all_columns() {
        let path = temp_csv("traj_missing");
        std::fs::write(&path, "episode_id,state,action,reward\n0,0,1,0.5\n").unwrap();
        assert!(matches!(
            load_trajectories_csv(&path),
            Err(EnvError::MissingColumn { ref name }) if name == "next_state"
        ));
    }
}
