//! MovieLens ingestion, rating binarization, temporal splitting and per-user
//! histories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{CcfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: u8,
    pub timestamp: i64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemInfo {
    pub title: String,
    pub genres: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    pub items: BTreeMap<u32, ItemInfo>,
}

impl ItemCatalog {
    pub fn title(&self, item: u32) -> Option<&str> {
        self.items.get(&item).map(|i| i.title.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MovieLensFormat {
    #[serde(rename = "ml-1m")]
    Ml1m,
    #[serde(rename = "ml-100k")]
    Ml100k,
}

impl FromStr for MovieLensFormat {
    type Err = CcfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml-1m" => Ok(MovieLensFormat::Ml1m),
            "ml-100k" => Ok(MovieLensFormat::Ml100k),
            other => Err(CcfError::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl MovieLensFormat {
    /// Default `(ratings, items)` file names inside a dataset directory.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            MovieLensFormat::Ml1m => ("ratings.dat", "movies.dat"),
            MovieLensFormat::Ml100k => ("u.data", "u.item"),
        }
    }
}

const ML100K_GENRES: [&str; 19] = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama",
    "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
];

/// UTF-8 when valid, otherwise Latin-1 (every byte is one code point).
fn decode_text(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| CcfError::Data(format!("{}: {e}", path.display())))?;
    Ok(decode_text(&bytes).lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CcfError {
    CcfError::Parse {
        file: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn field<T: FromStr>(path: &Path, line: usize, raw: &str, what: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} {raw:?}")))
}

fn parse_rating_line(path: &Path, lineno: usize, line: &str, format: MovieLensFormat) -> Result<Interaction> {
    let parts: Vec<&str> = match format {
        MovieLensFormat::Ml1m => line.split("::").collect(),
        MovieLensFormat::Ml100k => line.split('\t').collect(),
    };
    if parts.len() != 4 {
        return Err(parse_err(path, lineno, format!("expected 4 fields, found {}", parts.len())));
    }
    let rating: u8 = field(path, lineno, parts[2], "rating")?;
    if !(1..=5).contains(&rating) {
        return Err(parse_err(path, lineno, format!("rating {rating} outside 1..=5")));
    }
    Ok(Interaction {
        user: field(path, lineno, parts[0], "user id")?,
        item: field(path, lineno, parts[1], "item id")?,
        rating,
        timestamp: field(path, lineno, parts[3], "timestamp")?,
        label: 0,
    })
}

fn parse_item_line(path: &Path, lineno: usize, line: &str, format: MovieLensFormat) -> Result<(u32, ItemInfo)> {
    let (id, title, genres) = match format {
        MovieLensFormat::Ml1m => {
            let parts: Vec<&str> = line.splitn(3, "::").collect();
            if parts.len() != 3 {
                return Err(parse_err(path, lineno, "expected id::title::genres"));
            }
            let genres = parts[2]
                .split('|')
                .filter(|g| !g.is_empty())
                .map(str::to_string)
                .collect();
            (parts[0], parts[1].to_string(), genres)
        }
        MovieLensFormat::Ml100k => {
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() < 5 {
                return Err(parse_err(path, lineno, "expected id|title|release|video|url|genre flags"));
            }
            let genres = parts[5..]
                .iter()
                .zip(ML100K_GENRES)
                .filter(|(flag, _)| flag.trim() == "1")
                .map(|(_, g)| g.to_string())
                .collect();
            (parts[0], parts[1].to_string(), genres)
        }
    };
    let title = title.trim().to_string();
    if title.is_empty() {
        return Err(parse_err(path, lineno, "empty item title"));
    }
    Ok((field(path, lineno, id, "item id")?, ItemInfo { title, genres }))
}

/// Loads a ratings file and an item catalog.
pub fn load_movielens(
    ratings_path: &Path,
    items_path: &Path,
    format: MovieLensFormat,
) -> Result<(Vec<Interaction>, ItemCatalog)> {
    let mut catalog = ItemCatalog::default();
    for (i, line) in read_lines(items_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, info) = parse_item_line(items_path, i + 1, line, format)?;
        catalog.items.insert(id, info);
    }
    let mut interactions = Vec::new();
    for (i, line) in read_lines(ratings_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        interactions.push(parse_rating_line(ratings_path, i + 1, line, format)?);
    }
    let missing: BTreeSet<u32> = interactions
        .iter()
        .map(|x| x.item)
        .filter(|id| !catalog.items.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(CcfError::MissingItems(missing.into_iter().collect()));
    }
    Ok((interactions, catalog))
}

/// Resolves `<dir>/<format files>`.
pub fn dataset_files(dir: &Path, format: MovieLensFormat) -> (PathBuf, PathBuf) {
    let (r, i) = format.file_names();
    (dir.join(r), dir.join(i))
}

/// `label = 1` iff `rating > threshold`.
pub fn binarize(interactions: &[Interaction], threshold: u8) -> Vec<Interaction> {
    interactions
        .iter()
        .map(|x| Interaction {
            label: u8::from(x.rating > threshold),
            ..*x
        })
        .collect()
}

// Civil-date helpers (proleptic Gregorian, UTC) for month arithmetic.
fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m as i64 + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719468;
    let era = z.div_euclid(146097);
    let doe = z - era * 146097;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

/// `ts` moved back by `months` calendar months (day clamped to month end).
pub fn months_before(ts: i64, months: u32) -> i64 {
    let days = ts.div_euclid(86_400);
    let secs = ts.rem_euclid(86_400);
    let (y, m, d) = civil_from_days(days);
    let total = y * 12 + (m as i64 - 1) - months as i64;
    let (ny, nm) = (total.div_euclid(12), (total.rem_euclid(12) + 1) as u32);
    let month_len = days_from_civil(if nm == 12 { ny + 1 } else { ny }, if nm == 12 { 1 } else { nm + 1 }, 1)
        - days_from_civil(ny, nm, 1);
    let nd = d.min(month_len as u32);
    days_from_civil(ny, nm, nd) * 86_400 + secs
}

/// Keeps interactions from the `months` calendar months ending at the latest
/// timestamp.
pub fn recent_window(interactions: &[Interaction], months: u32) -> Vec<Interaction> {
    let Some(t_max) = interactions.iter().map(|x| x.timestamp).max() else {
        return Vec::new();
    };
    let start = months_before(t_max, months);
    interactions.iter().filter(|x| x.timestamp > start).copied().collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = CcfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" | "val" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            other => Err(CcfError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Chronological `(timestamp, item)` of each user's positive train items.
    history: HashMap<u32, Vec<(i64, u32)>>,
    /// Upper timestamp bounds of train and validation.
    pub boundaries: (f64, f64),
}

impl DatasetSplit {
    pub fn part(&self, tag: SplitTag) -> &[Interaction] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Validation => &self.validation,
            SplitTag::Test => &self.test,
        }
    }

    pub fn tagged(&self) -> impl Iterator<Item = (SplitTag, &Interaction)> {
        self.train
            .iter()
            .map(|x| (SplitTag::Train, x))
            .chain(self.validation.iter().map(|x| (SplitTag::Validation, x)))
            .chain(self.test.iter().map(|x| (SplitTag::Test, x)))
    }

    fn index_history(&mut self) {
        self.history.clear();
        for x in self.train.iter().filter(|x| x.label == 1) {
            self.history.entry(x.user).or_default().push((x.timestamp, x.item));
        }
        // train is already in stable timestamp order
    }

    pub fn from_parts(train: Vec<Interaction>, validation: Vec<Interaction>, test: Vec<Interaction>) -> Self {
        let mut train = train;
        train.sort_by_key(|x| x.timestamp);
        let mut s = DatasetSplit {
            train,
            validation,
            test,
            history: HashMap::new(),
            boundaries: (f64::NAN, f64::NAN),
        };
        s.index_history();
        s
    }
}

/// Sorts by timestamp (stable) and cuts at `t_min + r·(t_max − t_min)`
/// boundaries. An interaction exactly on a boundary goes to the earlier
/// split.
pub fn temporal_split(interactions: &[Interaction], ratios: (f64, f64, f64)) -> Result<DatasetSplit> {
    let (r1, r2, r3) = ratios;
    if r1 <= 0.0 || r2 <= 0.0 || r3 <= 0.0 || ((r1 + r2 + r3) - 1.0).abs() > 1e-9 {
        return Err(CcfError::Data(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    if interactions.len() < 3 {
        return Err(CcfError::Data(format!(
            "temporal split needs at least 3 interactions, got {}",
            interactions.len()
        )));
    }
    let mut sorted = interactions.to_vec();
    sorted.sort_by_key(|x| x.timestamp);
    let t0 = sorted[0].timestamp as f64;
    let t1 = sorted[sorted.len() - 1].timestamp as f64;
    let b1 = t0 + r1 * (t1 - t0);
    let b2 = t0 + (r1 + r2) * (t1 - t0);

    let mut split = DatasetSplit {
        boundaries: (b1, b2),
        ..Default::default()
    };
    for x in sorted {
        let t = x.timestamp as f64;
        if t <= b1 {
            split.train.push(x);
        } else if t <= b2 {
            split.validation.push(x);
        } else {
            split.test.push(x);
        }
    }
    if split.validation.is_empty() || split.test.is_empty() {
        warn!(
            "temporal split left validation={} test={} interactions",
            split.validation.len(),
            split.test.len()
        );
    }
    split.index_history();
    Ok(split)
}

/// Positive train items of `user` strictly before `before`, oldest first,
/// keeping the most recent `max_items`.
pub fn user_history(split: &DatasetSplit, user: u32, before: i64, max_items: usize) -> Vec<u32> {
    let Some(h) = split.history.get(&user) else {
        return Vec::new();
    };
    let end = h.partition_point(|&(t, _)| t < before);
    let start = end.saturating_sub(max_items);
    h[start..end].iter().map(|&(_, i)| i).collect()
}

/// Canonical CSV dump: `user_id,item_id,rating,timestamp,label,split`.
pub fn to_canonical_csv(split: &DatasetSplit) -> String {
    let mut out = String::from("user_id,item_id,rating,timestamp,label,split\n");
    for (tag, x) in split.tagged() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            x.user,
            x.item,
            x.rating,
            x.timestamp,
            x.label,
            tag.as_str()
        );
    }
    out
}

/// Dense row indices for users and items.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdIndex {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
    user_pos: HashMap<u32, usize>,
    item_pos: HashMap<u32, usize>,
}

impl IdIndex {
    pub fn new(users: impl IntoIterator<Item = u32>, items: impl IntoIterator<Item = u32>) -> Self {
        let users: Vec<u32> = users.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let items: Vec<u32> = items.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let user_pos = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let item_pos = items.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        IdIndex {
            users,
            items,
            user_pos,
            item_pos,
        }
    }

    /// Every user in `interactions` and every item in `interactions` or the
    /// catalog.
    pub fn from_data(interactions: &[Interaction], catalog: &ItemCatalog) -> Self {
        Self::new(
            interactions.iter().map(|x| x.user),
            interactions.iter().map(|x| x.item).chain(catalog.items.keys().copied()),
        )
    }

    pub fn user(&self, id: u32) -> Result<usize> {
        self.user_pos
            .get(&id)
            .copied()
            .ok_or(CcfError::UnknownId { kind: "user", id })
    }

    pub fn item(&self, id: u32) -> Result<usize> {
        self.item_pos
            .get(&id)
            .copied()
            .ok_or(CcfError::UnknownId { kind: "item", id })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ix(user: u32, item: u32, rating: u8, ts: i64) -> Interaction {
        Interaction {
            user,
            item,
            rating,
            timestamp: ts,
            label: 0,
        }
    }

    fn write_tmp(dir: &Path, name: &str, body: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body).unwrap();
        p
    }

    #[test]
    fn ml1m_line_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_tmp(dir.path(), "ratings.dat", b"1::1193::5::978300760\n");
        let m = write_tmp(
            dir.path(),
            "movies.dat",
            b"1193::One Flew Over the Cuckoo's Nest (1975)::Drama\n",
        );
        let (xs, cat) = load_movielens(&r, &m, MovieLensFormat::Ml1m).unwrap();
        assert_eq!(xs, vec![ix(1, 1193, 5, 978300760)]);
        assert_eq!(cat.items[&1193].genres, vec!["Drama"]);
    }

    #[test]
    fn ml100k_and_latin1_titles() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_tmp(dir.path(), "u.data", b"196\t242\t3\t881250949\n");
        let mut item = b"242|Kolya (1996)|24-Jan-1997||http://x|0|0|0|0|0|1|0|0|0|0|0|0|0|0|0|0|0|0|0\n"
            .to_vec();
        item.extend_from_slice(b"7|Caf\xe9 (1995)|||x|0|0|0|0|0|0|0|0|1|0|0|0|0|0|0|0|0|0|0\n");
        let m = write_tmp(dir.path(), "u.item", &item);
        let (xs, cat) = load_movielens(&r, &m, MovieLensFormat::Ml100k).unwrap();
        assert_eq!(xs[0], ix(196, 242, 3, 881250949));
        assert_eq!(cat.items[&242].genres, vec!["Comedy"]);
        assert_eq!(cat.items[&7].title, "Café (1995)");
    }

    #[test]
    fn empty_ratings_file_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_tmp(dir.path(), "ratings.dat", b"");
        let m = write_tmp(dir.path(), "movies.dat", b"1::A (1990)::Drama\n");
        let (xs, _) = load_movielens(&r, &m, MovieLensFormat::Ml1m).unwrap();
        assert!(xs.is_empty());
    }

    #[test]
    fn malformed_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_tmp(dir.path(), "ratings.dat", b"1::1::5::10\n1::1::x::11\n");
        let m = write_tmp(dir.path(), "movies.dat", b"1::A (1990)::Drama\n");
        let err = load_movielens(&r, &m, MovieLensFormat::Ml1m).unwrap_err().to_string();
        assert!(err.contains("ratings.dat:2"), "{err}");
    }

    #[test]
    fn missing_items_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_tmp(dir.path(), "ratings.dat", b"1::1::5::10\n1::9::4::11\n2::8::4::12\n");
        let m = write_tmp(dir.path(), "movies.dat", b"1::A (1990)::Drama\n");
        match load_movielens(&r, &m, MovieLensFormat::Ml1m) {
            Err(CcfError::MissingItems(ids)) => assert_eq!(ids, vec![8, 9]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binarize_uses_strict_threshold() {
        let xs = vec![ix(1, 1, 4, 0), ix(1, 2, 3, 0), ix(1, 3, 5, 0)];
        let l3: Vec<u8> = binarize(&xs, 3).iter().map(|x| x.label).collect();
        assert_eq!(l3, vec![1, 0, 1]);
        let l4: Vec<u8> = binarize(&xs, 4).iter().map(|x| x.label).collect();
        assert_eq!(l4, vec![0, 0, 1]);
    }

    #[test]
    fn uniform_timestamps_split_ten_five_five() {
        let xs: Vec<_> = (1..=20).map(|t| ix(1, t as u32, 4, t)).collect();
        let s = temporal_split(&xs, (0.5, 0.25, 0.25)).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (10, 5, 5));
    }

    #[test]
    fn single_timestamp_lands_in_train() {
        let xs: Vec<_> = (0..5).map(|i| ix(1, i, 4, 100)).collect();
        let s = temporal_split(&xs, (0.5, 0.25, 0.25)).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (5, 0, 0));
    }

    #[test]
    fn too_few_interactions() {
        let xs: Vec<_> = (0..2).map(|i| ix(1, i, 4, i as i64)).collect();
        assert!(temporal_split(&xs, (0.5, 0.25, 0.25)).is_err());
    }

    #[test]
    fn history_is_positive_train_before_timestamp() {
        let xs = binarize(
            &[
                ix(7, 1, 5, 1),
                ix(7, 2, 2, 2),
                ix(7, 3, 4, 3),
                ix(7, 4, 5, 4),
                ix(8, 5, 5, 5),
                ix(7, 6, 5, 6),
                ix(7, 7, 5, 7),
                ix(7, 8, 5, 8),
            ],
            3,
        );
        let s = temporal_split(&xs, (0.5, 0.25, 0.25)).unwrap();
        assert_eq!(user_history(&s, 7, 100, 10), vec![1, 3, 4]);
        assert_eq!(user_history(&s, 7, 4, 10), vec![1, 3]);
        assert_eq!(user_history(&s, 7, 100, 2), vec![3, 4]);
        assert!(user_history(&s, 7, 100, 0).is_empty());
        assert!(user_history(&s, 99, 100, 5).is_empty());
    }

    #[test]
    fn month_arithmetic() {
        // 2003-02-28T00:00:00Z minus 20 months = 2001-06-28
        let ts = days_from_civil(2003, 2, 28) * 86_400;
        assert_eq!(months_before(ts, 20), days_from_civil(2001, 6, 28) * 86_400);
        // 2001-03-31 minus 1 month clamps to 2001-02-28
        let ts = days_from_civil(2001, 3, 31) * 86_400 + 5;
        assert_eq!(months_before(ts, 1), days_from_civil(2001, 2, 28) * 86_400 + 5);
        assert_eq!(civil_from_days(days_from_civil(1997, 9, 20)), (1997, 9, 20));
    }
}
