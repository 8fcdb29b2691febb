//! Transcript ingestion, grade encoding, row-centering and chronological
//! splitting.
//!
//! Transcripts are CSV files with the header `student_id,course_id,term,grade`.
//! `term` is a calendar-term token that sorts lexicographically in time order
//! (`2015-1`, `2015-2`, ...). `grade` is either a letter on the 12-step ladder
//! or a decimal GPA value in `[0, 4]`. Pass/fail marks are dropped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{PredictionContext, PriorCourse};

/// Replacement for a centered grade that comes out as zero, so the course
/// still contributes to the knowledge state.
pub const ZERO_REPLACEMENT: f64 = 0.01;

/// Centered grades closer to zero than this count as zero.
pub const ZERO_TOLERANCE: f64 = 1e-9;

/// Minimum number of earlier courses before a validation or test record is
/// used as a prediction target.
pub const MIN_PRIOR_COURSES: usize = 4;

const PASS_FAIL_MARKS: &[&str] = &["S", "N", "P", "U", "NP", "CR", "NC", "PASS", "FAIL"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LetterGrade {
    A,
    AMinus,
    BPlus,
    B,
    BMinus,
    CPlus,
    C,
    CMinus,
    DPlus,
    D,
    DMinus,
    F,
}

impl LetterGrade {
    /// Best to worst.
    pub const LADDER: [LetterGrade; 12] = [
        LetterGrade::A,
        LetterGrade::AMinus,
        LetterGrade::BPlus,
        LetterGrade::B,
        LetterGrade::BMinus,
        LetterGrade::CPlus,
        LetterGrade::C,
        LetterGrade::CMinus,
        LetterGrade::DPlus,
        LetterGrade::D,
        LetterGrade::DMinus,
        LetterGrade::F,
    ];

    const POINTS: [f64; 12] = [
        4.000, 3.667, 3.333, 3.000, 2.667, 2.333, 2.000, 1.667, 1.333, 1.000, 0.667, 0.000,
    ];

    const SYMBOLS: [&'static str; 12] = [
        "A", "A-", "B+", "B", "B-", "C+", "C", "C-", "D+", "D", "D-", "F",
    ];

    /// Position on the ladder; `A` is 0, `F` is 11.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn points(self) -> f64 {
        Self::POINTS[self.index()]
    }

    pub fn symbol(self) -> &'static str {
        Self::SYMBOLS[self.index()]
    }

    pub fn from_symbol(symbol: &str) -> Option<Self> {
        Self::SYMBOLS
            .iter()
            .position(|s| s.eq_ignore_ascii_case(symbol))
            .map(|i| Self::LADDER[i])
    }

    /// The ladder entry whose point value is exactly `points`, if any.
    pub fn from_points(points: f64) -> Option<Self> {
        Self::POINTS
            .iter()
            .position(|&p| p == points)
            .map(|i| Self::LADDER[i])
    }

    /// Closest ladder entry after clamping to `[0, 4]`. Midpoints go to the
    /// higher grade.
    pub fn nearest(points: f64) -> Self {
        let points = if points.is_nan() {
            0.0
        } else {
            points.clamp(0.0, 4.0)
        };
        let mut best = LetterGrade::A;
        let mut best_dist = f64::INFINITY;
        // Walking from A downwards with a strict comparison keeps the higher
        // grade on ties.
        for grade in Self::LADDER {
            let dist = (grade.points() - points).abs();
            if dist < best_dist {
                best = grade;
                best_dist = dist;
            }
        }
        best
    }

    /// Signed tick distance: positive when `self` is better than `other`.
    pub fn ticks_above(self, other: LetterGrade) -> i32 {
        other.index() as i32 - self.index() as i32
    }
}

impl fmt::Display for LetterGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for LetterGrade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_symbol(s.trim()).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("'{s}' is not a letter grade"),
        })
    }
}

/// Which grade notations the `grade` column may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradeEncoding {
    /// Letters or decimals.
    #[default]
    Auto,
    Letter,
    Points,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradeRecord {
    pub student: String,
    pub course: String,
    /// Calendar-term token as it appears in the transcript.
    pub calendar_term: String,
    /// Per-student relative term, starting at 1.
    pub term: u32,
    /// GPA points.
    pub raw: f64,
    /// `raw - reference`, with zero replaced by [`ZERO_REPLACEMENT`].
    pub centered: f64,
    /// Mean of the student's earlier grades (the prior GPA the grade is
    /// centered on).
    pub reference: f64,
}

impl GradeRecord {
    pub fn new(student: &str, course: &str, calendar_term: &str, raw: f64) -> Self {
        GradeRecord {
            student: student.to_string(),
            course: course.to_string(),
            calendar_term: calendar_term.to_string(),
            term: 0,
            raw,
            centered: 0.0,
            reference: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub rows: usize,
    pub dropped_pass_fail: usize,
}

/// A centered transcript: records grouped by student (ascending id), each
/// student's records ordered by term.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    records: Vec<GradeRecord>,
    students: Vec<Range<usize>>,
    student_of: Vec<usize>,
}

/// One student's courses, term by term.
#[derive(Clone, Debug)]
pub struct StudentHistory<'a> {
    pub student: &'a str,
    /// `terms[w - 1]` holds the records of relative term `w`.
    pub terms: Vec<Vec<&'a GradeRecord>>,
}

impl Dataset {
    /// Groups, orders, indexes and centers `records`. Duplicate courses within
    /// one student's term are rejected.
    pub fn from_records(mut records: Vec<GradeRecord>) -> Result<Self> {
        // Stable sort keeps file order among records of the same term.
        records.sort_by(|a, b| {
            a.student
                .cmp(&b.student)
                .then_with(|| a.calendar_term.cmp(&b.calendar_term))
        });
        let mut students = Vec::new();
        let mut student_of = Vec::with_capacity(records.len());
        let mut start = 0;
        while start < records.len() {
            let mut end = start;
            while end < records.len() && records[end].student == records[start].student {
                end += 1;
            }
            assign_terms(&mut records[start..end])?;
            student_of.extend(std::iter::repeat_n(students.len(), end - start));
            students.push(start..end);
            start = end;
        }
        row_center(&mut records);
        Ok(Dataset {
            records,
            students,
            student_of,
        })
    }

    pub fn records(&self) -> &[GradeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    /// Record indices belonging to the same student as record `idx`.
    pub fn student_range(&self, idx: usize) -> Range<usize> {
        self.students[self.student_of[idx]].clone()
    }

    pub fn student_records(&self, student: &str) -> Option<&[GradeRecord]> {
        self.students
            .iter()
            .find(|r| self.records[r.start].student == student)
            .map(|r| &self.records[r.clone()])
    }

    pub fn histories(&self) -> impl Iterator<Item = StudentHistory<'_>> + '_ {
        self.students.iter().map(|range| {
            let records = &self.records[range.clone()];
            let n_terms = records.last().map_or(0, |r| r.term as usize);
            let mut terms = vec![Vec::new(); n_terms];
            for rec in records {
                terms[rec.term as usize - 1].push(rec);
            }
            StudentHistory {
                student: &records[0].student,
                terms,
            }
        })
    }

    /// Index of the student's latest record of `course`.
    pub fn find(&self, student: &str, course: &str) -> Option<usize> {
        let range = self
            .students
            .iter()
            .find(|r| self.records[r.start].student == student)?;
        range
            .clone()
            .rev()
            .find(|&i| self.records[i].course == course)
    }

    /// Number of the student's records in terms strictly before record `idx`.
    pub fn prior_count(&self, idx: usize) -> usize {
        let term = self.records[idx].term;
        self.records[self.student_range(idx)]
            .iter()
            .take_while(|r| r.term < term)
            .count()
    }

    /// Builds the prediction context of record `idx`: the student's courses
    /// from earlier terms (with term gaps) and the other courses of the same
    /// term. Prior or concurrent courses outside `vocab` are skipped; an
    /// unknown target is an error. `need_student` additionally requires the
    /// student to be in `vocab`.
    pub fn context(
        &self,
        idx: usize,
        vocab: &Vocabulary,
        need_student: bool,
    ) -> Result<PredictionContext> {
        let target = &self.records[idx];
        let target_course = vocab
            .course(&target.course)
            .ok_or_else(|| Error::UnknownEntity {
                kind: "course",
                id: target.course.clone(),
            })?;
        let student = vocab.student(&target.student);
        if need_student && student.is_none() {
            return Err(Error::UnknownEntity {
                kind: "student",
                id: target.student.clone(),
            });
        }
        let mut prior = Vec::new();
        let mut concurrent = Vec::new();
        for (j, rec) in self.records[self.student_range(idx)].iter().enumerate() {
            let Some(course) = vocab.course(&rec.course) else {
                continue;
            };
            if rec.term < target.term {
                prior.push(PriorCourse {
                    course,
                    grade: rec.centered,
                    gap: target.term - rec.term,
                });
            } else if rec.term == target.term && j + self.student_range(idx).start != idx {
                concurrent.push(course);
            }
        }
        Ok(PredictionContext {
            student,
            target: target_course,
            prior,
            concurrent,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_records(self.records.iter(), writer)
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn assign_terms(records: &mut [GradeRecord]) -> Result<()> {
    let mut term = 0u32;
    let mut current: Option<String> = None;
    let mut seen: HashSet<String> = HashSet::new();
    for rec in records.iter_mut() {
        if current.as_deref() != Some(rec.calendar_term.as_str()) {
            term += 1;
            current = Some(rec.calendar_term.clone());
            seen.clear();
        }
        if !seen.insert(rec.course.clone()) {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "student {} has course {} twice in term {}",
                    rec.student, rec.course, rec.calendar_term
                ),
            });
        }
        rec.term = term;
    }
    Ok(())
}

/// Centers one grade on a reference mean.
pub fn center(raw: f64, reference: f64) -> f64 {
    let centered = raw - reference;
    if centered.abs() < ZERO_TOLERANCE {
        ZERO_REPLACEMENT
    } else {
        centered
    }
}

/// Fills `centered` and `reference` for records that are grouped by student
/// and ordered by relative term within each student.
///
/// The reference of a term-`w` record is the mean of all the student's
/// records from terms `1..w`. First-term records have no history; they are
/// centered on the mean of the first term itself.
pub fn row_center(records: &mut [GradeRecord]) {
    let mut start = 0;
    while start < records.len() {
        let mut end = start;
        while end < records.len() && records[end].student == records[start].student {
            end += 1;
        }
        let student = &mut records[start..end];
        let mut prior_sum = 0.0;
        let mut prior_n = 0usize;
        let mut i = 0;
        while i < student.len() {
            let term = student[i].term;
            let mut j = i;
            while j < student.len() && student[j].term == term {
                j += 1;
            }
            let reference = if prior_n == 0 {
                student[i..j].iter().map(|r| r.raw).sum::<f64>() / (j - i) as f64
            } else {
                prior_sum / prior_n as f64
            };
            for rec in &mut student[i..j] {
                rec.reference = reference;
                rec.centered = center(rec.raw, reference);
            }
            for rec in &student[i..j] {
                prior_sum += rec.raw;
            }
            prior_n += j - i;
            i = j;
        }
        start = end;
    }
}

fn parse_grade(token: &str, encoding: GradeEncoding, line: u64) -> Result<Option<f64>> {
    let token = token.trim();
    if PASS_FAIL_MARKS
        .iter()
        .any(|m| m.eq_ignore_ascii_case(token))
    {
        return Ok(None);
    }
    if encoding != GradeEncoding::Points {
        if let Some(grade) = LetterGrade::from_symbol(token) {
            return Ok(Some(grade.points()));
        }
    }
    if encoding != GradeEncoding::Letter {
        if let Ok(value) = token.parse::<f64>() {
            if value.is_nan() {
                return Err(Error::Parse {
                    line,
                    message: "grade is NaN".into(),
                });
            }
            if !(0.0..=4.0).contains(&value) {
                return Err(Error::GradeRange { line, value });
            }
            return Ok(Some(value));
        }
    }
    Err(Error::Parse {
        line,
        message: format!("unrecognized grade '{token}'"),
    })
}

/// Reads a transcript CSV.
pub fn read_csv<R: Read>(reader: R, encoding: GradeEncoding) -> Result<(Dataset, IngestStats)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["student_id", "course_id", "term", "grade"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut stats = IngestStats::default();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        stats.rows += 1;
        if row.len() != 4 || row.iter().take(3).any(str::is_empty) {
            return Err(Error::Parse {
                line,
                message: "expected four non-empty fields".into(),
            });
        }
        match parse_grade(&row[3], encoding, line)? {
            Some(raw) => records.push(GradeRecord::new(&row[0], &row[1], &row[2], raw)),
            None => stats.dropped_pass_fail += 1,
        }
    }
    let dataset = Dataset::from_records(records).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse { line: 0, message },
        other => other,
    })?;
    Ok((dataset, stats))
}

/// Reads a transcript CSV from disk.
pub fn ingest(path: &Path, encoding: GradeEncoding) -> Result<(Dataset, IngestStats)> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    read_csv(std::io::BufReader::new(file), encoding)
}

/// Grade column token: the letter when the value is exactly a ladder point,
/// otherwise the shortest decimal that parses back to the same value.
pub fn grade_token(raw: f64) -> String {
    match LetterGrade::from_points(raw) {
        Some(g) => g.symbol().to_string(),
        None => format!("{raw}"),
    }
}

pub fn write_records<'a, W: Write>(
    records: impl Iterator<Item = &'a GradeRecord>,
    writer: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["student_id", "course_id", "term", "grade"])?;
    for rec in records {
        wtr.write_record([
            rec.student.as_str(),
            rec.course.as_str(),
            rec.calendar_term.as_str(),
            &grade_token(rec.raw),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Sorted course and student ids with dense indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    courses: Vec<String>,
    students: Vec<String>,
    course_index: HashMap<String, usize>,
    student_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(mut courses: Vec<String>, mut students: Vec<String>) -> Self {
        courses.sort();
        courses.dedup();
        students.sort();
        students.dedup();
        let course_index = courses
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        let student_index = students
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocabulary {
            courses,
            students,
            course_index,
            student_index,
        }
    }

    /// Courses and students appearing in the given records.
    pub fn from_records<'a>(records: impl Iterator<Item = &'a GradeRecord>) -> Self {
        let mut courses = BTreeMap::new();
        let mut students = BTreeMap::new();
        for rec in records {
            courses.insert(rec.course.clone(), ());
            students.insert(rec.student.clone(), ());
        }
        Vocabulary::new(
            courses.into_keys().collect(),
            students.into_keys().collect(),
        )
    }

    pub fn course(&self, id: &str) -> Option<usize> {
        self.course_index.get(id).copied()
    }

    pub fn student(&self, id: &str) -> Option<usize> {
        self.student_index.get(id).copied()
    }

    pub fn courses(&self) -> &[String] {
        &self.courses
    }

    pub fn students(&self) -> &[String] {
        &self.students
    }
}

/// A prediction target with its context.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index of the target record in its dataset.
    pub record: usize,
    pub context: PredictionContext,
    /// Centered grade to predict.
    pub actual: f64,
    pub raw: f64,
    /// Prior GPA the grade was centered on.
    pub reference: f64,
}

/// Builds samples for the given target records. Targets whose course or
/// (when `need_student`) student is outside `vocab`, or that end up with no
/// prior course inside `vocab`, are skipped and counted.
pub fn build_samples(
    dataset: &Dataset,
    targets: &[usize],
    vocab: &Vocabulary,
    need_student: bool,
) -> (Vec<Sample>, usize) {
    let mut skipped = 0;
    let mut samples = Vec::with_capacity(targets.len());
    for &idx in targets {
        match dataset.context(idx, vocab, need_student) {
            Ok(context) if need_student || !context.prior.is_empty() => {
                let rec = &dataset.records()[idx];
                samples.push(Sample {
                    record: idx,
                    context,
                    actual: rec.centered,
                    raw: rec.raw,
                    reference: rec.reference,
                });
            }
            _ => skipped += 1,
        }
    }
    (samples, skipped)
}

/// Why validation/test records were not kept as targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Exclusions {
    pub too_few_prior: usize,
    pub unseen_course: usize,
}

/// Chronological split. Partitions hold record indices into the dataset the
/// split was computed from; validation and test hold eligible targets only.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train_end: String,
    pub val_end: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub excluded_validation: Exclusions,
    pub excluded_test: Exclusions,
}

/// Unfiltered three-way partition by calendar term: `term <= train_end`,
/// `train_end < term <= val_end`, and the rest.
pub fn partition(
    dataset: &Dataset,
    train_end: &str,
    val_end: &str,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if train_end >= val_end {
        return Err(Error::Config(format!(
            "train end '{train_end}' must precede validation end '{val_end}'"
        )));
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in dataset.records().iter().enumerate() {
        let term = rec.calendar_term.as_str();
        if term <= train_end {
            parts.0.push(i);
        } else if term <= val_end {
            parts.1.push(i);
        } else {
            parts.2.push(i);
        }
    }
    Ok(parts)
}

pub fn split_chronological(
    dataset: &Dataset,
    train_end: &str,
    val_end: &str,
) -> Result<DatasetSplit> {
    let (train, validation, test) = partition(dataset, train_end, val_end)?;
    if train.is_empty() {
        return Err(Error::Config(format!(
            "no records at or before train end '{train_end}'"
        )));
    }
    let train_courses: HashSet<&str> = train
        .iter()
        .map(|&i| dataset.records()[i].course.as_str())
        .collect();
    let filter = |indices: Vec<usize>| {
        let mut excluded = Exclusions::default();
        let kept = indices
            .into_iter()
            .filter(|&i| {
                if dataset.prior_count(i) < MIN_PRIOR_COURSES {
                    excluded.too_few_prior += 1;
                    false
                } else if !train_courses.contains(dataset.records()[i].course.as_str()) {
                    excluded.unseen_course += 1;
                    false
                } else {
                    true
                }
            })
            .collect::<Vec<_>>();
        (kept, excluded)
    };
    let (validation, excluded_validation) = filter(validation);
    let (test, excluded_test) = filter(test);
    if test.is_empty() {
        log::warn!("test partition after '{val_end}' has no eligible targets");
    }
    Ok(DatasetSplit {
        train_end: train_end.to_string(),
        val_end: val_end.to_string(),
        train,
        validation,
        test,
        excluded_validation,
        excluded_test,
    })
}

impl DatasetSplit {
    /// Training records that have at least one earlier course.
    pub fn train_targets(&self, dataset: &Dataset) -> Vec<usize> {
        self.train
            .iter()
            .copied()
            .filter(|&i| dataset.records()[i].term > 1)
            .collect()
    }

    /// Vocabulary of the training partition.
    pub fn vocabulary(&self, dataset: &Dataset) -> Vocabulary {
        Vocabulary::from_records(self.train.iter().map(|&i| &dataset.records()[i]))
    }
}
