use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::manifest::ClipRecord;
use super::CorpusError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_speakers: usize,
    pub n_clips: usize,
    pub n_videos: usize,
    pub total_minutes: f64,
    pub avg_clips_per_speaker: f64,
    pub avg_videos_per_speaker: f64,
    pub avg_clip_length_s: f64,
    pub per_label: BTreeMap<String, usize>,
    pub per_gender: BTreeMap<String, usize>,
}

pub fn compute_stats(records: &[ClipRecord]) -> Result<CorpusStats, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    let speakers: BTreeSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
    let videos: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    let total_s: f64 = records.iter().map(|r| r.duration_s).sum();
    let mut per_label = BTreeMap::new();
    let mut per_gender = BTreeMap::new();
    for r in records {
        *per_label.entry(r.label.clone()).or_insert(0) += 1;
        *per_gender.entry(r.gender.to_string()).or_insert(0) += 1;
    }
    let n_speakers = speakers.len();
    let n_clips = records.len();
    Ok(CorpusStats {
        n_speakers,
        n_clips,
        n_videos: videos.len(),
        total_minutes: total_s / 60.0,
        avg_clips_per_speaker: n_clips as f64 / n_speakers as f64,
        avg_videos_per_speaker: videos.len() as f64 / n_speakers as f64,
        avg_clip_length_s: total_s / n_clips as f64,
        per_label,
        per_gender,
    })
}

#[cfg(test)]
mod tests {
    use super::super::manifest::Gender;
    use super::*;

    fn rec(speaker: &str, video: &str, d: f64) -> ClipRecord {
        ClipRecord {
            clip_id: format!("{speaker}_{video}_{d}"),
            path: "x.wav".into(),
            speaker_id: speaker.into(),
            video_id: video.into(),
            gender: Gender::Female,
            label: "a".into(),
            duration_s: d,
        }
    }

    #[test]
    fn single_clip_averages_equal_the_clip() {
        let s = compute_stats(&[rec("s", "v", 6.0)]).unwrap();
        assert_eq!(s.avg_clips_per_speaker, 1.0);
        assert_eq!(s.avg_videos_per_speaker, 1.0);
        assert_eq!(s.avg_clip_length_s, 6.0);
        assert_eq!(s.total_minutes, 0.1);
    }

    #[test]
    fn three_and_five_clips_average_four() {
        let mut m: Vec<_> = (0..3).map(|i| rec("a", "va", 4.0 + i as f64)).collect();
        m.extend((0..5).map(|i| rec("b", if i < 2 { "vb" } else { "vc" }, 5.0)));
        let s = compute_stats(&m).unwrap();
        assert_eq!(s.avg_clips_per_speaker, 4.0);
        assert_eq!(s.avg_videos_per_speaker, 1.5);
        assert_eq!(s.per_gender["female"], 8);
    }

    #[test]
    fn empty_manifest_errors() {
        assert!(matches!(compute_stats(&[]), Err(CorpusError::EmptyManifest)));
    }
}
