//! Dataset container and CSV ingestion.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernels::Inputs;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Inputs,
    pub response: Option<DVector<f64>>,
    pub input_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn response(&self) -> Result<&DVector<f64>> {
        self.response
            .as_ref()
            .ok_or_else(|| Error::InvalidData("dataset has no response column".into()))
    }

    /// All responses in {0, 1}.
    pub fn check_binary(&self) -> Result<()> {
        let y = self.response()?;
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidData("Bernoulli responses must be in {0, 1}".into()));
        }
        Ok(())
    }
}

/// Read a headered CSV. `input_cols` selects input columns by name (all
/// non-response columns when empty); `response_col` may be absent for
/// prediction inputs.
pub fn read_csv(
    path: &Path,
    input_cols: &[String],
    response_col: Option<&str>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let response_ix = match response_col {
        None => None,
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidData(format!("response column '{name}' not found")))?,
        ),
    };
    let input_ix: Vec<usize> = if input_cols.is_empty() {
        (0..headers.len()).filter(|&i| Some(i) != response_ix).collect()
    } else {
        input_cols
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::InvalidData(format!("input column '{name}' not found")))
            })
            .collect::<Result<Vec<_>>>()?
    };
    if input_ix.is_empty() {
        return Err(Error::InvalidData("no input columns selected".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut responses: Vec<f64> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |ix: usize| -> Result<f64> {
            record
                .get(ix)
                .ok_or_else(|| Error::InvalidData(format!("row {line}: missing column {ix}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidData(format!("row {line}: {e}")))
        };
        let mut row = Vec::with_capacity(input_ix.len());
        for &ix in &input_ix {
            let v = parse(ix)?;
            if !v.is_finite() {
                return Err(Error::InvalidData(format!("row {line}: non-finite input")));
            }
            row.push(v);
        }
        rows.push(row);
        if let Some(ix) = response_ix {
            let v = parse(ix)?;
            if !v.is_finite() {
                return Err(Error::InvalidData(format!("row {line}: non-finite response")));
            }
            responses.push(v);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    let d = input_ix.len();
    let mut inputs = Inputs::zeros(rows.len(), d);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            inputs[(i, j)] = v;
        }
    }
    Ok(Dataset {
        inputs,
        response: response_ix.map(|_| DVector::from_vec(responses)),
        input_names: input_ix.iter().map(|&i| headers[i].clone()).collect(),
    })
}

/// Write a dataset with a response column; the inverse of [`read_csv`].
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = data.input_names.clone();
    if header.is_empty() {
        header = (0..data.dim()).map(|j| format!("x{j}")).collect();
    }
    if data.response.is_some() {
        header.push("y".to_string());
    }
    writer.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = (0..data.dim()).map(|j| data.inputs[(i, j)].to_string()).collect();
        if let Some(y) = &data.response {
            rec.push(y[i].to_string());
        }
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Predictions CSV with columns `(id, mean, variance[, probability])`.
pub fn write_predictions_csv(
    path: &Path,
    means: &DVector<f64>,
    variances: &DVector<f64>,
    probabilities: Option<&DVector<f64>>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["id", "mean", "variance"];
    if probabilities.is_some() {
        header.push("probability");
    }
    writer.write_record(&header)?;
    for i in 0..means.len() {
        let mut rec = vec![i.to_string(), means[i].to_string(), variances[i].to_string()];
        if let Some(p) = probabilities {
            rec.push(p[i].to_string());
        }
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}
