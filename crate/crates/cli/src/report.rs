use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub primal: BTreeMap<String, f64>,
    pub derivatives: Vec<DerivativeRow>,
    pub bench: Vec<BenchRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRow {
    pub request: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub order: u32,
    pub outputs: u64,
    pub mean_ns: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "RR")]
    pub rr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// One header row, then one row per primal, derivative and bench entry.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "kind", "name", "value", "order", "outputs", "mean_ns", "R", "RR",
        ])?;
        for (name, v) in &self.primal {
            w.write_record(["primal", name, &v.to_string(), "", "", "", "", ""])?;
        }
        for d in &self.derivatives {
            w.write_record([
                "derivative",
                &d.request,
                &d.value.to_string(),
                "",
                "",
                "",
                "",
                "",
            ])?;
        }
        for b in &self.bench {
            w.write_record([
                "bench",
                "",
                "",
                &b.order.to_string(),
                &b.outputs.to_string(),
                &b.mean_ns.to_string(),
                &b.r.to_string(),
                &b.rr.map(|x| x.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}
