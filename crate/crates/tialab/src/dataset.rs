//! Dataset directories: one `<id>.tlab` blob of `[t, h, w, c]` frames per
//! video, `annotations.csv` (`video_id,t_start,t_end,class`, seconds) and
//! `meta.csv` (`video_id,fps,num_frames`). Videos load in `meta.csv` order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use tialab_core::data::{ActionAnnotation, VideoSample};

use crate::blob;
use crate::error::{format_err, io_err, Error, Result};

pub const ANNOTATIONS: &str = "annotations.csv";
pub const META: &str = "meta.csv";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') && !id.starts_with('.')
}

pub fn save(dir: &Path, videos: &[VideoSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let apath = dir.join(ANNOTATIONS);
    let mpath = dir.join(META);
    let mut ann = csv::Writer::from_path(&apath).map_err(csv_err(&apath))?;
    let mut meta = csv::Writer::from_path(&mpath).map_err(csv_err(&mpath))?;
    ann.write_record(["video_id", "t_start", "t_end", "class"]).map_err(csv_err(&apath))?;
    meta.write_record(["video_id", "fps", "num_frames"]).map_err(csv_err(&mpath))?;
    for v in videos {
        if !valid_id(&v.id) {
            return Err(format_err(dir.display(), format!("video id {:?} is not a valid file stem", v.id)));
        }
        blob::save(&dir.join(format!("{}.tlab", v.id)), &v.frames)?;
        meta.write_record([v.id.clone(), v.fps.to_string(), v.num_frames().to_string()])
            .map_err(csv_err(&mpath))?;
        for a in &v.annotations {
            ann.write_record([v.id.clone(), a.t_start.to_string(), a.t_end.to_string(), a.class.to_string()])
                .map_err(csv_err(&apath))?;
        }
    }
    ann.flush().map_err(io_err(&apath))?;
    meta.flush().map_err(io_err(&mpath))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path, what: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| format_err(format!("{}:{line}", path.display()), format!("bad {what} {:?}", rec.get(i).unwrap_or(""))))
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<fs::File>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err(path))?;
    let h = r.headers().map_err(csv_err(path))?;
    if h.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(format_err(path.display(), format!("expected header {}", header.join(","))));
    }
    Ok(r)
}

/// Loads a dataset directory and validates every annotation against
/// `classes` and the video duration.
pub fn load(dir: &Path, classes: usize) -> Result<Vec<VideoSample>> {
    let mpath = dir.join(META);
    let apath = dir.join(ANNOTATIONS);
    let mut videos = Vec::new();
    let mut index = BTreeMap::new();
    for rec in reader(&mpath, &["video_id", "fps", "num_frames"])?.records() {
        let rec = rec.map_err(csv_err(&mpath))?;
        let id: String = field(&rec, 0, &mpath, "video id")?;
        let fps: f64 = field(&rec, 1, &mpath, "fps")?;
        let n: usize = field(&rec, 2, &mpath, "frame count")?;
        if !valid_id(&id) || index.contains_key(&id) {
            return Err(format_err(mpath.display(), format!("invalid or repeated video id {id:?}")));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(format_err(mpath.display(), format!("{id}: fps must be positive")));
        }
        let frames = blob::load(&dir.join(format!("{id}.tlab")))?;
        if frames.shape().len() != 4 || frames.shape()[0] != n {
            return Err(format_err(
                mpath.display(),
                format!("{id}: expected [{n}, h, w, c] frames, blob has {:?}", frames.shape()),
            ));
        }
        index.insert(id.clone(), videos.len());
        videos.push(VideoSample {
            id,
            frames,
            fps,
            annotations: Vec::new(),
        });
    }
    for rec in reader(&apath, &["video_id", "t_start", "t_end", "class"])?.records() {
        let rec = rec.map_err(csv_err(&apath))?;
        let id: String = field(&rec, 0, &apath, "video id")?;
        let &i = index
            .get(&id)
            .ok_or_else(|| format_err(apath.display(), format!("annotation for unknown video {id:?}")))?;
        videos[i].annotations.push(ActionAnnotation {
            t_start: field(&rec, 1, &apath, "t_start")?,
            t_end: field(&rec, 2, &apath, "t_end")?,
            class: field(&rec, 3, &apath, "class")?,
        });
    }
    for v in &videos {
        v.validate(classes)?;
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tialab_core::data::{generate_dataset, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            frames: (24, 40),
            action_frames: (4, 10),
            actions: (0, 3),
            size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let videos = generate_dataset(&spec(), 5).unwrap();
        save(dir.path(), &videos).unwrap();
        let back = load(dir.path(), 3).unwrap();
        assert_eq!(back, videos);
    }

    #[test]
    fn equal_seeds_give_equal_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save(a.path(), &generate_dataset(&spec(), 3).unwrap()).unwrap();
        save(b.path(), &generate_dataset(&spec(), 3).unwrap()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 5);
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
        }
    }

    #[test]
    fn rejects_bad_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let videos = generate_dataset(&spec(), 1).unwrap();
        save(dir.path(), &videos).unwrap();
        let id = &videos[0].id;
        fs::write(dir.path().join(ANNOTATIONS), format!("video_id,t_start,t_end,class\n{id},1,0.5,0\n")).unwrap();
        assert!(load(dir.path(), 3).is_err());
        fs::write(dir.path().join(ANNOTATIONS), "video_id,t_start,t_end,class\nnope,0,0.5,0\n").unwrap();
        assert!(load(dir.path(), 3).is_err());
        fs::write(dir.path().join(ANNOTATIONS), format!("video_id,t_start,t_end,class\n{id},0,0.1,7\n")).unwrap();
        assert!(load(dir.path(), 3).is_err());
    }
}
