//! CSV outputs. Every table may start with `#` note lines, which readers
//! skip.

use std::fs;
use std::io::Write;
use std::path::Path;

use tialab_core::eval::MapResult;
use tialab_core::memory::MemoryEstimate;

use crate::error::{format_err, io_err, Error, Result};

/// A header plus string rows, written through the csv crate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub notes: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    /// Adds one note per line of `s`.
    pub fn note(&mut self, s: impl Into<String>) -> &mut Self {
        self.notes.extend(s.into().lines().map(String::from));
        self
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn get(&self, row: usize, name: &str) -> Option<&str> {
        let c = self.column(name)?;
        self.rows.get(row).map(|r| r[c].as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        w.into_inner().expect("in-memory csv")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: origin.to_string(),
            source,
        };
        // notes only lead the file, so a later cell starting with `#` is data
        let mut notes = Vec::new();
        let mut body = text;
        while body.starts_with('#') {
            let (line, rest) = body.split_once('\n').unwrap_or((body, ""));
            let line = line.strip_suffix('\r').unwrap_or(line);
            let line = &line[1..];
            notes.push(line.strip_prefix(' ').unwrap_or(line).to_string());
            body = rest;
        }
        let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(csv_err)?;
        Ok(Self { notes, header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Checks the header against `expected`.
    pub fn expect_header(&self, expected: &[&str], origin: &str) -> Result<()> {
        if self.header.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(format_err(origin, format!("expected columns {}", expected.join(","))));
        }
        Ok(())
    }
}

pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// One proposal in video seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalRow {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class: usize,
    pub score: f64,
}

pub const PROPOSAL_COLUMNS: [&str; 5] = ["video_id", "t_start", "t_end", "class", "score"];

pub fn proposals_table(rows: &[ProposalRow]) -> Table {
    let mut t = Table::new(PROPOSAL_COLUMNS);
    for p in rows {
        t.push([p.video_id.clone(), fmt6(p.t_start), fmt6(p.t_end), p.class.to_string(), fmt6(p.score)]);
    }
    t
}

pub fn parse_proposals(t: &Table, origin: &str) -> Result<Vec<ProposalRow>> {
    t.expect_header(&PROPOSAL_COLUMNS, origin)?;
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = || format_err(origin, format!("row {}: bad proposal {r:?}", i + 1));
            let f = |j: usize| r[j].parse::<f64>().map_err(|_| bad());
            Ok(ProposalRow {
                video_id: r[0].clone(),
                t_start: f(1)?,
                t_end: f(2)?,
                class: r[3].parse().map_err(|_| bad())?,
                score: f(4)?,
            })
        })
        .collect()
}

fn ap_cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt6)
}

/// Rows per threshold plus `avg`; columns `class_<c>` then `mAP`. Classes
/// without ground truth leave their cells empty.
pub fn results_table(r: &MapResult) -> Table {
    let mut header = vec!["tiou".to_string()];
    header.extend((0..r.classes).map(|c| format!("class_{c}")));
    header.push("mAP".into());
    let mut t = Table::new(header);
    for (i, th) in r.thresholds.iter().enumerate() {
        let mut row = vec![format!("{th}")];
        row.extend(r.per_class[i].iter().map(|&x| ap_cell(x)));
        row.push(fmt6(r.per_threshold[i]));
        t.push(row);
    }
    let mut row = vec!["avg".to_string()];
    row.extend((0..r.classes).map(|c| ap_cell(r.class_average(c))));
    row.push(fmt6(r.average));
    t.push(row);
    t
}

/// The `avg` row's mAP.
pub fn results_average(t: &Table, origin: &str) -> Result<f64> {
    let row = t
        .rows
        .iter()
        .position(|r| r.first().map(String::as_str) == Some("avg"))
        .ok_or_else(|| format_err(origin, "no avg row"))?;
    t.get(row, "mAP")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(origin, "no mAP column"))
}

pub const MEMBENCH_COLUMNS: [&str; 10] = [
    "strategy",
    "representation",
    "N",
    "d",
    "T",
    "activation_bytes",
    "parameter_bytes",
    "gradient_bytes",
    "optimizer_bytes",
    "total_bytes",
];

pub fn membench_table(rows: &[MemoryEstimate]) -> Table {
    let mut t = Table::new(MEMBENCH_COLUMNS);
    for e in rows {
        t.push([
            e.strategy.label(),
            e.strategy.repr.name().to_string(),
            e.shape.backbone.layers.to_string(),
            e.shape.backbone.dim.to_string(),
            e.shape.frames.to_string(),
            e.activation_bytes.to_string(),
            e.parameter_bytes.to_string(),
            e.gradient_bytes.to_string(),
            e.optimizer_bytes.to_string(),
            e.total_bytes.to_string(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use tialab_core::eval::{mean_ap, EvalConfig, GroundTruth, Prediction};

    #[test]
    fn notes_and_quoting_round_trip() {
        let mut t = Table::new(["a", "b"]);
        t.note("line one\nline two");
        t.push(["x,y", "say \"hi\""]);
        let back = Table::parse(std::str::from_utf8(&t.to_bytes()).unwrap(), "t").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn proposals_use_six_decimals() {
        let rows = vec![ProposalRow {
            video_id: "v".into(),
            t_start: 1.0 / 3.0,
            t_end: 2.5,
            class: 1,
            score: 0.123_456_789,
        }];
        let t = proposals_table(&rows);
        let text = String::from_utf8(t.to_bytes()).unwrap();
        assert_eq!(text, "video_id,t_start,t_end,class,score\nv,0.333333,2.500000,1,0.123457\n");
        let back = parse_proposals(&Table::parse(&text, "p").unwrap(), "p").unwrap();
        assert!((back[0].t_start - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(back[0].class, 1);
    }

    #[test]
    fn results_layout() {
        let gts = [GroundTruth { video: 0, t_start: 0.0, t_end: 1.0, class: 0 }];
        let preds = [Prediction { video: 0, t_start: 0.0, t_end: 1.0, class: 0, score: 0.9 }];
        let r = mean_ap(&preds, &gts, 2, &EvalConfig { thresholds: vec![0.5, 0.7] }).unwrap();
        let t = results_table(&r);
        assert_eq!(t.header, ["tiou", "class_0", "class_1", "mAP"]);
        assert_eq!(t.rows[0], ["0.5", "1.000000", "", "1.000000"]);
        assert_eq!(t.rows[2][0], "avg");
        let back = Table::parse(std::str::from_utf8(&t.to_bytes()).unwrap(), "r").unwrap();
        assert_eq!(results_average(&back, "r").unwrap(), 1.0);
    }
}
