//! The model catalog: every variant produced by the pruning workflow, with
//! its lineage, accuracy, and filter counts.
//!
//! A catalog lives in memory and can be saved to a directory: one binary
//! model file per record plus a human-readable `index.toml`. Records are
//! append-only and keep their insertion ordinal — the planner uses it as the
//! deterministic tie-break.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;

const INDEX_FILE: &str = "index.toml";

/// Where a record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lineage {
    Original,
    /// Global-range pruning curve; iteration 0 duplicates the original.
    Step1 { iteration: usize },
    /// Per-layer pruning family rooted at the selected step-1 model;
    /// iteration 0 duplicates that root.
    Step2 { layer: usize, iteration: usize },
}

/// Catalog entry metadata (the parameters live in the paired [`ModelState`]).
#[derive(Clone, Debug)]
pub struct CatalogRecord {
    pub id: String,
    /// Insertion order; stable across save/load. Smaller wins planner ties.
    pub ordinal: usize,
    pub lineage: Lineage,
    /// Test accuracy recorded when the model was produced.
    pub accuracy: f64,
    /// True when this record fell below the pruning accuracy floor (kept as
    /// curve data; still plannable if the caller's floor is lower).
    pub below_floor: bool,
    /// Filter count per convolution layer, in network order.
    pub filter_counts: Vec<usize>,
}

/// All models produced by one pruning run, keyed by id.
#[derive(Clone, Debug)]
pub struct Catalog {
    records: Vec<CatalogRecord>,
    models: Vec<ModelState>,
    baseline_accuracy: f64,
    step1_selected: Option<String>,
}

impl Catalog {
    /// Starts a catalog with the trained original model as record 0.
    pub fn new(original: ModelState, baseline_accuracy: f64) -> Result<Self> {
        original.spec.validate()?;
        if !(0.0..=1.0).contains(&baseline_accuracy) {
            return Err(Error::invalid(format!(
                "baseline accuracy must be in [0, 1], got {baseline_accuracy}"
            )));
        }
        let record = CatalogRecord {
            id: "original".to_string(),
            ordinal: 0,
            lineage: Lineage::Original,
            accuracy: baseline_accuracy,
            below_floor: false,
            filter_counts: original.spec.filter_counts(),
        };
        Ok(Catalog {
            records: vec![record],
            models: vec![original],
            baseline_accuracy,
            step1_selected: None,
        })
    }

    pub fn baseline_accuracy(&self) -> f64 {
        self.baseline_accuracy
    }

    pub fn records(&self) -> &[CatalogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a catalog always holds at least the original
    }

    pub fn record(&self, id: &str) -> Option<&CatalogRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelState> {
        self.records
            .iter()
            .position(|r| r.id == id)
            .map(|i| &self.models[i])
    }

    pub fn original_model(&self) -> &ModelState {
        &self.models[0]
    }

    /// Appends a record; ids must be unique and filter counts are derived
    /// from the model itself.
    pub fn insert(
        &mut self,
        id: String,
        lineage: Lineage,
        model: ModelState,
        accuracy: f64,
        below_floor: bool,
    ) -> Result<()> {
        if self.record(&id).is_some() {
            return Err(Error::invalid(format!("duplicate catalog id {id:?}")));
        }
        if matches!(lineage, Lineage::Original) {
            return Err(Error::invalid("catalog already holds the original record"));
        }
        self.records.push(CatalogRecord {
            id,
            ordinal: self.records.len(),
            lineage,
            accuracy,
            below_floor,
            filter_counts: model.spec.filter_counts(),
        });
        self.models.push(model);
        Ok(())
    }

    /// Drops everything but the original record, for a fresh step-1 run over
    /// an already-trained baseline.
    pub fn reset_to_original(&mut self) {
        self.records.truncate(1);
        self.models.truncate(1);
        self.step1_selected = None;
    }

    /// Drops step-2 records (keeping the step-1 history and selection), for a
    /// fresh step-2 run.
    pub fn drop_step2(&mut self) {
        let keep: Vec<bool> = self
            .records
            .iter()
            .map(|r| !matches!(r.lineage, Lineage::Step2 { .. }))
            .collect();
        let mut flags = keep.iter();
        self.records.retain(|_| *flags.next().expect("one flag per record"));
        let mut flags = keep.iter();
        self.models.retain(|_| *flags.next().expect("one flag per model"));
        for (i, r) in self.records.iter_mut().enumerate() {
            r.ordinal = i;
        }
    }

    /// Marks the step-1 record every step-2 family grows from.
    pub fn select_step1(&mut self, id: &str) -> Result<()> {
        match self.record(id) {
            Some(r) if matches!(r.lineage, Lineage::Step1 { .. }) => {
                self.step1_selected = Some(id.to_string());
                Ok(())
            }
            Some(_) => Err(Error::invalid(format!("{id:?} is not a step-1 record"))),
            None => Err(Error::invalid(format!("no catalog record {id:?}"))),
        }
    }

    pub fn step1_selected(&self) -> Option<&str> {
        self.step1_selected.as_deref()
    }

    /// The selected step-1 model, or a missing-prerequisite error.
    pub fn step1_model(&self) -> Result<&ModelState> {
        let id = self.step1_selected.as_deref().ok_or_else(|| {
            Error::MissingPrerequisite("no step-1 model selected; run step 1 first".into())
        })?;
        Ok(self.model(id).expect("selected id was validated"))
    }

    /// Step-2 records grouped by pruned layer, in iteration order.
    pub fn step2_families(&self) -> BTreeMap<usize, Vec<&CatalogRecord>> {
        let mut families: BTreeMap<usize, Vec<&CatalogRecord>> = BTreeMap::new();
        for r in &self.records {
            if let Lineage::Step2 { layer, .. } = r.lineage {
                families.entry(layer).or_default().push(r);
            }
        }
        for fam in families.values_mut() {
            fam.sort_by_key(|r| match r.lineage {
                Lineage::Step2 { iteration, .. } => iteration,
                _ => unreachable!(),
            });
        }
        families
    }

    /// Writes `index.toml` plus one `{id}.model` file per record into `dir`
    /// (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut doc = IndexDoc {
            baseline_accuracy: self.baseline_accuracy,
            step1_selected: self.step1_selected.clone(),
            records: Vec::with_capacity(self.records.len()),
        };
        for (record, model) in self.records.iter().zip(&self.models) {
            let file = format!("{}.model", record.id);
            model.save(&dir.join(&file))?;
            let (kind, layer, iteration) = match record.lineage {
                Lineage::Original => ("original", None, None),
                Lineage::Step1 { iteration } => ("step1", None, Some(iteration)),
                Lineage::Step2 { layer, iteration } => ("step2", Some(layer), Some(iteration)),
            };
            doc.records.push(RecordDoc {
                id: record.id.clone(),
                ordinal: record.ordinal,
                kind: kind.to_string(),
                layer,
                iteration,
                accuracy: record.accuracy,
                below_floor: record.below_floor,
                filter_counts: record.filter_counts.clone(),
                file,
            });
        }
        let text = toml::to_string_pretty(&doc).map_err(|e| Error::Format {
            what: "catalog index",
            detail: e.to_string(),
        })?;
        std::fs::write(dir.join(INDEX_FILE), text)?;
        Ok(())
    }

    /// Loads a catalog saved by [`Catalog::save`], re-validating every model
    /// against its index entry.
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "no catalog at {} (missing {INDEX_FILE})",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&index_path)?;
        let doc: IndexDoc = toml::from_str(&text).map_err(|e| Error::Format {
            what: "catalog index",
            detail: e.to_string(),
        })?;
        let bad = |detail: String| Error::Format { what: "catalog index", detail };
        if doc.records.is_empty() {
            return Err(bad("catalog has no records".into()));
        }
        let mut records = Vec::with_capacity(doc.records.len());
        let mut models = Vec::with_capacity(doc.records.len());
        for (i, rec) in doc.records.iter().enumerate() {
            if rec.ordinal != i {
                return Err(bad(format!(
                    "record {:?} has ordinal {}, expected {i}",
                    rec.id, rec.ordinal
                )));
            }
            let lineage = match (rec.kind.as_str(), rec.layer, rec.iteration) {
                ("original", None, None) => Lineage::Original,
                ("step1", None, Some(iteration)) => Lineage::Step1 { iteration },
                ("step2", Some(layer), Some(iteration)) => Lineage::Step2 { layer, iteration },
                _ => {
                    return Err(bad(format!(
                        "record {:?} has inconsistent lineage fields",
                        rec.id
                    )))
                }
            };
            if i == 0 && lineage != Lineage::Original {
                return Err(bad("record 0 must be the original".into()));
            }
            if records.iter().any(|r: &CatalogRecord| r.id == rec.id) {
                return Err(bad(format!("duplicate id {:?}", rec.id)));
            }
            let model = ModelState::load(&dir.join(&rec.file))?;
            if model.spec.filter_counts() != rec.filter_counts {
                return Err(bad(format!(
                    "record {:?}: index filter counts {:?} do not match the model file {:?}",
                    rec.id,
                    rec.filter_counts,
                    model.spec.filter_counts()
                )));
            }
            records.push(CatalogRecord {
                id: rec.id.clone(),
                ordinal: rec.ordinal,
                lineage,
                accuracy: rec.accuracy,
                below_floor: rec.below_floor,
                filter_counts: rec.filter_counts.clone(),
            });
            models.push(model);
        }
        let catalog = Catalog {
            records,
            models,
            baseline_accuracy: doc.baseline_accuracy,
            step1_selected: None,
        };
        let mut catalog = catalog;
        if let Some(id) = doc.step1_selected {
            catalog.select_step1(&id).map_err(|e| bad(e.to_string()))?;
        }
        Ok(catalog)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexDoc {
    baseline_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    step1_selected: Option<String>,
    records: Vec<RecordDoc>,
}

#[derive(Serialize, Deserialize)]
struct RecordDoc {
    id: String,
    ordinal: usize,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iteration: Option<usize>,
    accuracy: f64,
    below_floor: bool,
    filter_counts: Vec<usize>,
    file: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::zoo;

    fn model(seed: u64) -> ModelState {
        let spec: ModelSpec = zoo::vgg(&zoo::VggConfig {
            input: (1, 8, 8),
            classes: 2,
            stage_widths: vec![4],
            convs_per_stage: vec![1],
            fc_hidden: vec![],
        })
        .unwrap();
        ModelState::init(spec, seed).unwrap()
    }

    fn sample_catalog() -> Catalog {
        let mut c = Catalog::new(model(0), 0.9).unwrap();
        c.insert("step1-i0".into(), Lineage::Step1 { iteration: 0 }, model(1), 0.9, false)
            .unwrap();
        c.insert("step1-i1".into(), Lineage::Step1 { iteration: 1 }, model(2), 0.85, false)
            .unwrap();
        c.select_step1("step1-i1").unwrap();
        c.insert(
            "step2-conv1-i1".into(),
            Lineage::Step2 { layer: 0, iteration: 1 },
            model(3),
            0.8,
            true,
        )
        .unwrap();
        c
    }

    #[test]
    fn ordinals_follow_insertion_order() {
        let c = sample_catalog();
        let ordinals: Vec<usize> = c.records().iter().map(|r| r.ordinal).collect();
        assert_eq!(ordinals, vec![0, 1, 2, 3]);
        assert_eq!(c.records()[0].id, "original");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut c = sample_catalog();
        assert!(c
            .insert("step1-i1".into(), Lineage::Step1 { iteration: 9 }, model(4), 0.5, false)
            .is_err());
    }

    #[test]
    fn step1_selection_is_validated() {
        let mut c = sample_catalog();
        assert!(c.select_step1("nope").is_err());
        assert!(c.select_step1("original").is_err());
        assert!(c.select_step1("step1-i0").is_ok());
    }

    #[test]
    fn missing_step1_is_a_prerequisite_error() {
        let c = Catalog::new(model(0), 0.9).unwrap();
        assert!(matches!(c.step1_model(), Err(Error::MissingPrerequisite(_))));
    }

    #[test]
    fn reset_keeps_only_the_original() {
        let mut c = sample_catalog();
        c.reset_to_original();
        assert_eq!(c.len(), 1);
        assert_eq!(c.records()[0].id, "original");
        assert!(c.step1_selected().is_none());
        assert!(c.model("original").is_some());
        // The catalog accepts a fresh pruning pass afterwards.
        c.insert("step1-i0".into(), Lineage::Step1 { iteration: 0 }, model(9), 0.9, false)
            .unwrap();
        assert_eq!(c.records()[1].ordinal, 1);
    }

    #[test]
    fn dropping_step2_keeps_step1_history_and_selection() {
        let mut c = sample_catalog();
        c.drop_step2();
        let ids: Vec<&str> = c.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["original", "step1-i0", "step1-i1"]);
        let ordinals: Vec<usize> = c.records().iter().map(|r| r.ordinal).collect();
        assert_eq!(ordinals, vec![0, 1, 2]);
        assert_eq!(c.step1_selected(), Some("step1-i1"));
        assert!(c.step2_families().is_empty());
        // Records and models stay paired.
        assert!(c.model("step1-i1").is_some());
        assert!(c.model("step2-conv1-i1").is_none());
    }

    #[test]
    fn families_group_by_layer_in_iteration_order() {
        let mut c = sample_catalog();
        c.insert(
            "step2-conv1-i0".into(),
            Lineage::Step2 { layer: 0, iteration: 0 },
            model(5),
            0.85,
            false,
        )
        .unwrap();
        let fams = c.step2_families();
        assert_eq!(fams.len(), 1);
        let ids: Vec<&str> = fams[&0].iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["step2-conv1-i0", "step2-conv1-i1"]);
    }

    #[test]
    fn save_load_round_trip() {
        let c = sample_catalog();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Catalog::load(dir.path()).unwrap();
        assert_eq!(back.len(), c.len());
        assert_eq!(back.baseline_accuracy(), c.baseline_accuracy());
        assert_eq!(back.step1_selected(), Some("step1-i1"));
        for (a, b) in c.records().iter().zip(back.records()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.ordinal, b.ordinal);
            assert_eq!(a.lineage, b.lineage);
            assert_eq!(a.accuracy, b.accuracy);
            assert_eq!(a.filter_counts, b.filter_counts);
        }
        assert_eq!(back.model("step2-conv1-i1"), c.model("step2-conv1-i1"));
    }

    #[test]
    fn load_rejects_missing_and_tampered_indexes() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Catalog::load(dir.path()),
            Err(Error::MissingPrerequisite(_))
        ));

        let c = sample_catalog();
        c.save(dir.path()).unwrap();
        let index = dir.path().join(INDEX_FILE);
        let text = std::fs::read_to_string(&index).unwrap();
        std::fs::write(&index, text.replace("filter_counts = [4]", "filter_counts = [5]"))
            .unwrap();
        assert!(matches!(Catalog::load(dir.path()), Err(Error::Format { .. })));
    }
}
