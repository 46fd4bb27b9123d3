//! Mixed image/video batch schedules.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One kind of batch: `batch` clips of `frames × height × width` drawn from
/// the dataset named `source`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleEntry {
    pub source: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub probability: f64,
}

impl FromStr for ScheduleEntry {
    type Err = Error;

    /// `source:frames:height:width:batch:probability`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || Error::Config(format!("schedule entry {:?} is not source:frames:height:width:batch:prob", s));
        if parts.len() != 6 {
            return Err(bad());
        }
        let n = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        Ok(ScheduleEntry {
            source: parts[0].to_string(),
            frames: n(1)?,
            height: n(2)?,
            width: n(3)?,
            batch: n(4)?,
            probability: parts[5].parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for ScheduleEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}:{}:{}",
            self.source, self.frames, self.height, self.width, self.batch, self.probability
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSchedule {
    pub entries: Vec<ScheduleEntry>,
}

/// Named pools of `(1, T, H, W, 3)` clips.
pub type Datasets = BTreeMap<String, Vec<Tensor<f32>>>;

impl BatchSchedule {
    pub fn new(entries: Vec<ScheduleEntry>, rho_t: usize) -> Result<Self> {
        let s = BatchSchedule { entries };
        s.validate(rho_t)?;
        Ok(s)
    }

    pub fn validate(&self, rho_t: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("batch schedule is empty".into()));
        }
        let mut sum = 0.0;
        for e in &self.entries {
            if !(e.probability >= 0.0) {
                return Err(Error::Config(format!("negative probability in {}", e)));
            }
            if e.frames == 0 || (e.frames - 1) % rho_t != 0 {
                return Err(Error::Config(format!(
                    "entry {} has {} frames, which is not 1 mod {}",
                    e, e.frames, rho_t
                )));
            }
            if e.batch == 0 || e.height == 0 || e.width == 0 {
                return Err(Error::Config(format!("entry {} has an empty extent", e)));
            }
            sum += e.probability;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("schedule probabilities sum to {}, not 1", sum)));
        }
        Ok(())
    }

    /// Index of an entry drawn by probability.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, e) in self.entries.iter().enumerate() {
            acc += e.probability;
            if u < acc {
                return i;
            }
        }
        self.entries.len() - 1
    }
}

/// Draws a schedule entry and assembles its batch from random temporal
/// windows and spatial crops of clips in the matching dataset.
pub fn sample_batch<R: Rng + ?Sized>(
    schedule: &BatchSchedule,
    datasets: &Datasets,
    rng: &mut R,
) -> Result<(usize, Tensor<f32>)> {
    let idx = schedule.draw(rng);
    let e = &schedule.entries[idx];
    let pool = datasets
        .get(&e.source)
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::Config(format!("dataset {:?} is missing or empty", e.source)))?;
    let mut items = Vec::with_capacity(e.batch);
    for _ in 0..e.batch {
        let clip = &pool[rng.gen_range(0..pool.len())];
        let [_, t, h, w, _] = clip.dims5()?;
        if t < e.frames || h < e.height || w < e.width {
            return Err(Error::Config(format!(
                "clip {:?} in {:?} is smaller than entry {}",
                clip.shape(),
                e.source,
                e
            )));
        }
        let t0 = rng.gen_range(0..=t - e.frames);
        let y0 = rng.gen_range(0..=h - e.height);
        let x0 = rng.gen_range(0..=w - e.width);
        items.push(clip.slice_time(t0, e.frames)?.crop_hw(y0, e.height, x0, e.width)?);
    }
    let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
    for it in &items {
        data.extend_from_slice(it.data());
    }
    let batch = Tensor::from_vec(&[e.batch, e.frames, e.height, e.width, 3], data)?;
    Ok((idx, batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_round_trip() {
        let e: ScheduleEntry = "rects:9:16:16:2:0.25".parse().unwrap();
        assert_eq!(e.to_string().parse::<ScheduleEntry>().unwrap(), e);
        assert!("rects:9:16".parse::<ScheduleEntry>().is_err());
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let e: ScheduleEntry = "a:9:8:8:1:0.5".parse().unwrap();
        assert!(BatchSchedule::new(vec![e.clone()], 4).is_err());
        assert!(BatchSchedule::new(vec![e.clone(), e], 4).is_ok());
    }

    #[test]
    fn frame_congruence_checked() {
        let e: ScheduleEntry = "a:8:8:8:1:1".parse().unwrap();
        assert!(BatchSchedule::new(vec![e], 4).is_err());
    }
}
