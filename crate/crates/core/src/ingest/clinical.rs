//! Clinical records and the standardize + one-hot encoder fitted on the
//! training cohort.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed categorical vocabulary.
pub trait Categorical: Sized + Copy {
    const FIELD: &'static str;
    const VOCAB: &'static [&'static str];

    fn index(self) -> usize;
    fn from_index(i: usize) -> Self;

    fn as_str(self) -> &'static str {
        Self::VOCAB[self.index()]
    }

    /// Case-insensitive match against the vocabulary, plus a few common aliases.
    fn parse(raw: &str) -> Option<Self> {
        let norm = normalize(raw);
        Self::VOCAB
            .iter()
            .position(|v| normalize(v) == norm)
            .or_else(|| Self::alias(&norm))
            .map(Self::from_index)
    }

    fn alias(_norm: &str) -> Option<usize> {
        None
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_ascii_lowercase().replace(['_', '-'], " ")
}

macro_rules! categorical {
    ($name:ident, $field:literal, [$($variant:ident => $label:literal),+ $(,)?]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

categorical!(TumorType, "tumor_type", [
    InvasiveDuctal => "Invasive ductal carcinoma",
    InvasiveLobular => "Invasive lobular carcinoma",
    Other => "Other types",
]);
categorical!(TStage, "t_stage", [T1 => "T1", T2 => "T2"]);
categorical!(ReceptorStatus, "status", [Positive => "Positive", Negative => "Negative"]);
categorical!(MolecularSubtype, "molecular_subtype", [
    LuminalA => "Luminal A",
    LuminalB => "Luminal B",
    TripleNegative => "Triple negative",
    Her2Positive => "HER2(+)",
]);

impl Categorical for TumorType {
    const FIELD: &'static str = "tumor_type";
    const VOCAB: &'static [&'static str] = &[
        "Invasive ductal carcinoma",
        "Invasive lobular carcinoma",
        "Other types",
    ];
    fn index(self) -> usize {
        self as usize
    }
    fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
    fn alias(norm: &str) -> Option<usize> {
        match norm {
            "idc" | "ductal" => Some(0),
            "ilc" | "lobular" => Some(1),
            "other" => Some(2),
            _ => None,
        }
    }
}

impl Categorical for TStage {
    const FIELD: &'static str = "t_stage";
    const VOCAB: &'static [&'static str] = &["T1", "T2"];
    fn index(self) -> usize {
        self as usize
    }
    fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

impl Categorical for ReceptorStatus {
    const FIELD: &'static str = "status";
    const VOCAB: &'static [&'static str] = &["Positive", "Negative"];
    fn index(self) -> usize {
        self as usize
    }
    fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
    fn alias(norm: &str) -> Option<usize> {
        match norm {
            "+" | "pos" | "1" => Some(0),
            "neg" | "0" => Some(1),
            _ => None,
        }
    }
}

impl Categorical for MolecularSubtype {
    const FIELD: &'static str = "molecular_subtype";
    const VOCAB: &'static [&'static str] =
        &["Luminal A", "Luminal B", "Triple negative", "HER2(+)"];
    fn index(self) -> usize {
        self as usize
    }
    fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
    fn alias(norm: &str) -> Option<usize> {
        match norm {
            "tnbc" => Some(2),
            "her2" | "her2+" | "her2 enriched" => Some(3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    /// Years.
    pub age: f64,
    /// Centimetres.
    pub tumor_size: f64,
    pub tumor_type: TumorType,
    pub t_stage: TStage,
    pub er: ReceptorStatus,
    pub pr: ReceptorStatus,
    pub her2: ReceptorStatus,
    pub molecular_subtype: MolecularSubtype,
}

pub const NUMERIC_COLUMNS: [&str; 2] = ["age", "tumor_size"];
pub const CATEGORICAL_COLUMNS: [&str; 6] = [
    "tumor_type",
    "t_stage",
    "er",
    "pr",
    "her2",
    "molecular_subtype",
];

impl ClinicalRecord {
    fn numeric(&self) -> [f64; 2] {
        [self.age, self.tumor_size]
    }

    fn categorical(&self) -> [&'static str; 6] {
        [
            self.tumor_type.as_str(),
            self.t_stage.as_str(),
            self.er.as_str(),
            self.pr.as_str(),
            self.her2.as_str(),
            self.molecular_subtype.as_str(),
        ]
    }

    fn vocabularies() -> [&'static [&'static str]; 6] {
        [
            TumorType::VOCAB,
            TStage::VOCAB,
            ReceptorStatus::VOCAB,
            ReceptorStatus::VOCAB,
            ReceptorStatus::VOCAB,
            MolecularSubtype::VOCAB,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in NUMERIC_COLUMNS.iter().zip(self.numeric()) {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct ClinicalRow {
    slide_id: String,
    age: f64,
    tumor_size: f64,
    tumor_type: String,
    t_stage: String,
    er: String,
    pr: String,
    her2: String,
    molecular_subtype: String,
}

fn parse_cat<T: Categorical>(row: usize, field: &str, raw: &str) -> Result<T> {
    T::parse(raw).ok_or_else(|| Error::UnknownCategory {
        row,
        field: field.to_string(),
        value: raw.to_string(),
    })
}

/// Reads the clinical table keyed by `slide_id`. Rows are numbered from 1
/// (the header is row 0) in error messages.
pub fn load_clinical_csv(path: &Path) -> Result<HashMap<String, ClinicalRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut out = HashMap::new();
    for (i, row) in reader.deserialize::<ClinicalRow>().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::csv(path, e))?;
        let rec = ClinicalRecord {
            age: row.age,
            tumor_size: row.tumor_size,
            tumor_type: parse_cat(row_no, "tumor_type", &row.tumor_type)?,
            t_stage: parse_cat(row_no, "t_stage", &row.t_stage)?,
            er: parse_cat(row_no, "er", &row.er)?,
            pr: parse_cat(row_no, "pr", &row.pr)?,
            her2: parse_cat(row_no, "her2", &row.her2)?,
            molecular_subtype: parse_cat(row_no, "molecular_subtype", &row.molecular_subtype)?,
        };
        rec.validate()
            .map_err(|e| Error::invalid(format!("{}: row {row_no}: {e}", path.display())))?;
        if out.insert(row.slide_id.clone(), rec).is_some() {
            return Err(Error::DuplicateSlide(row.slide_id));
        }
    }
    Ok(out)
}

pub fn write_clinical_csv(path: &Path, rows: &[(String, ClinicalRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["slide_id"];
    header.extend(NUMERIC_COLUMNS);
    header.extend(CATEGORICAL_COLUMNS);
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (id, r) in rows {
        let mut rec = vec![
            id.clone(),
            format!("{}", r.age),
            format!("{}", r.tumor_size),
        ];
        rec.extend(r.categorical().iter().map(|s| s.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericColumn {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation; zero marks a constant column.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    pub vocabulary: Vec<String>,
}

/// Frozen encoder: numeric columns standardized with training statistics,
/// categorical columns expanded to one indicator per vocabulary value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEncoder {
    pub numeric: Vec<NumericColumn>,
    pub categorical: Vec<CategoricalColumn>,
}

impl ClinicalEncoder {
    /// Fits on the given cohort. Returns the encoder and any warnings raised
    /// (zero-variance columns).
    pub fn fit<'a, I>(records: I) -> Result<(Self, Vec<String>)>
    where
        I: IntoIterator<Item = &'a ClinicalRecord>,
    {
        let rows: Vec<[f64; 2]> = records.into_iter().map(ClinicalRecord::numeric).collect();
        if rows.is_empty() {
            return Err(Error::invalid(
                "cannot fit clinical encoder on an empty cohort",
            ));
        }
        let n = rows.len() as f64;
        let mut warnings = Vec::new();
        let numeric = NUMERIC_COLUMNS
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                if std <= f64::EPSILON * mean.abs().max(1.0) {
                    let msg =
                        format!("clinical column `{name}` has zero variance; encoded as zeros");
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                NumericColumn {
                    name: name.to_string(),
                    mean,
                    std: if std <= f64::EPSILON * mean.abs().max(1.0) {
                        0.0
                    } else {
                        std
                    },
                }
            })
            .collect();
        let categorical = CATEGORICAL_COLUMNS
            .iter()
            .zip(ClinicalRecord::vocabularies())
            .map(|(name, vocab)| CategoricalColumn {
                name: name.to_string(),
                vocabulary: vocab.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        Ok((
            ClinicalEncoder {
                numeric,
                categorical,
            },
            warnings,
        ))
    }

    pub fn width(&self) -> usize {
        self.numeric.len()
            + self
                .categorical
                .iter()
                .map(|c| c.vocabulary.len())
                .sum::<usize>()
    }

    pub fn encode(&self, record: &ClinicalRecord) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        for (col, v) in self.numeric.iter().zip(record.numeric()) {
            out.push(if col.std == 0.0 {
                0.0
            } else {
                (v - col.mean) / col.std
            });
        }
        for (col, v) in self.categorical.iter().zip(record.categorical()) {
            let hit = col.vocabulary.iter().position(|c| c == v).ok_or_else(|| {
                Error::invalid(format!(
                    "unseen `{}` category `{v}` at transform time",
                    col.name
                ))
            })?;
            out.extend((0..col.vocabulary.len()).map(|i| if i == hit { 1.0 } else { 0.0 }));
        }
        Ok(out)
    }

    pub fn transform<'a, I>(&self, records: I) -> Result<Array2<f64>>
    where
        I: IntoIterator<Item = &'a ClinicalRecord>,
    {
        let rows = records
            .into_iter()
            .map(|r| self.encode(r))
            .collect::<Result<Vec<_>>>()?;
        let width = self.width();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((flat.len() / width, width), flat)
            .expect("every encoded row has the encoder width"))
    }

    /// Maps standardized numeric values back to raw units. Constant columns
    /// come back as their mean.
    pub fn inverse_numeric(&self, encoded: &[f64]) -> Vec<f64> {
        self.numeric
            .iter()
            .zip(encoded)
            .map(|(c, z)| c.mean + z * c.std)
            .collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.numeric.iter().map(|c| c.name.clone()).collect();
        for c in &self.categorical {
            names.extend(c.vocabulary.iter().map(|v| format!("{}={v}", c.name)));
        }
        names
    }
}

/// Fits the encoder on `fit_cohort` (indices into `records`) and encodes all
/// records with it.
pub fn preprocess_clinical(
    records: &[ClinicalRecord],
    fit_cohort: &[usize],
) -> Result<(ClinicalEncoder, Array2<f64>)> {
    if fit_cohort.is_empty() {
        return Err(Error::invalid("fit cohort is empty"));
    }
    let fit_rows = fit_cohort
        .iter()
        .map(|&i| {
            records
                .get(i)
                .ok_or_else(|| Error::invalid(format!("fit index {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (encoder, _warnings) = ClinicalEncoder::fit(fit_rows)?;
    let matrix = encoder.transform(records)?;
    Ok((encoder, matrix))
}
