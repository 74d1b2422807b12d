//! Corpus classification, statistics and benchmark reports.

pub mod corpus;
pub mod report;
pub mod stats;

pub use corpus::{classify_corpus, classify_fixture, parse_fixture, CorpusReport, Fixture, Histogram, Verdict};
pub use report::{write_report, Metric};
pub use stats::{welch_t_test, SampleSet, WelchResult, ALPHA};
