//! Flat CSV renderings of the analysis results. JSON output is plain serde.

use std::io::{self, Write};

use super::{
    BehaviorClass, BenchmarkReport, DiscrepancyReport, NondeterminismFlag, OracleStatus, OracleTable, ScoreTable,
};

/// A report that flattens to one CSV table with a fixed header.
pub trait CsvReport {
    fn header(&self) -> Vec<&'static str>;
    fn records(&self) -> Vec<Vec<String>>;

    /// RFC 4180 CSV, CRLF line endings, header first.
    fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
        writer.write_record(self.header())?;
        for record in self.records() {
            writer.write_record(record)?;
        }
        writer.flush()
    }

    fn to_csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("csv output is UTF-8")
    }
}

impl CsvReport for Vec<BehaviorClass> {
    fn header(&self) -> Vec<&'static str> {
        vec!["class", "implementation", "fingerprint"]
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.iter()
            .enumerate()
            .flat_map(|(i, class)| {
                class
                    .members
                    .iter()
                    .map(move |m| vec![(i + 1).to_string(), m.clone(), class.fingerprint.clone()])
            })
            .collect()
    }
}

impl CsvReport for OracleTable {
    fn header(&self) -> Vec<&'static str> {
        vec!["sheet", "row", "status", "expected", "support", "voters"]
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let status = match r.status {
                    OracleStatus::Resolved => "resolved",
                    OracleStatus::Tie => "tie",
                    OracleStatus::Unresolved => "unresolved",
                };
                vec![
                    r.sheet_id.clone(),
                    r.row.to_string(),
                    status.to_string(),
                    r.expected.clone().unwrap_or_default(),
                    r.support.to_string(),
                    r.votes.values().sum::<usize>().to_string(),
                ]
            })
            .collect()
    }
}

impl CsvReport for ScoreTable {
    fn header(&self) -> Vec<&'static str> {
        vec!["implementation", "sheet", "passed"]
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.scores
            .iter()
            .flat_map(|s| {
                s.sheets
                    .iter()
                    .map(move |sheet| vec![s.implementation_id.clone(), sheet.sheet_id.clone(), sheet.passed.to_string()])
            })
            .collect()
    }
}

impl CsvReport for DiscrepancyReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["sheet", "row", "outcome", "members"]
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.entries
            .iter()
            .flat_map(|e| {
                e.classes
                    .iter()
                    .map(move |c| vec![e.sheet_id.clone(), e.row.to_string(), c.outcome.clone(), c.members.join(";")])
            })
            .collect()
    }
}

impl CsvReport for Vec<NondeterminismFlag> {
    fn header(&self) -> Vec<&'static str> {
        vec!["implementation", "sheet", "repetitions", "distinct_behaviors"]
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|f| {
                vec![
                    f.implementation_id.clone(),
                    f.sheet_id.clone(),
                    f.repetitions.to_string(),
                    f.distinct_behaviors.to_string(),
                ]
            })
            .collect()
    }
}

impl CsvReport for BenchmarkReport {
    fn header(&self) -> Vec<&'static str> {
        vec!["abstraction", "samples", "correct", "k", "pass_at_k"]
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.results
            .iter()
            .map(|r| {
                vec![
                    self.abstraction_id.clone(),
                    self.samples.to_string(),
                    self.correct.to_string(),
                    r.k.to_string(),
                    r.pass_at_k.to_string(),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{Discrepancy, OutcomeClass};

    #[test]
    fn discrepancy_csv_joins_members() {
        let report = DiscrepancyReport {
            abstraction_id: "sum".into(),
            implementations: vec!["a".into(), "b".into(), "c".into()],
            entries: vec![Discrepancy {
                sheet_id: "s1".into(),
                row: 1,
                classes: vec![
                    OutcomeClass {
                        outcome: "value:\"x,y\"".into(),
                        members: vec!["a".into(), "b".into()],
                    },
                    OutcomeClass {
                        outcome: "crash".into(),
                        members: vec!["c".into()],
                    },
                ],
            }],
        };
        assert_eq!(
            report.to_csv_string(),
            "sheet,row,outcome,members\r\ns1,1,\"value:\"\"x,y\"\"\",a;b\r\ns1,1,crash,c\r\n"
        );
    }
}
