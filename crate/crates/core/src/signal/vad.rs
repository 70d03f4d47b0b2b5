use super::pitch::PitchTrack;

/// A frame is active iff it is voiced and its raw energy exceeds
/// `floor_ratio` times the utterance median energy.
pub fn detect_voice_activity(pitch: &PitchTrack, energy: &[f64], floor_ratio: f64) -> Vec<u8> {
    assert_eq!(pitch.len(), energy.len(), "pitch and energy tracks are not aligned");
    let floor = floor_ratio * median(energy);
    pitch
        .iter()
        .zip(energy)
        .map(|(f, e)| u8::from(f.is_some() && *e > floor))
        .collect()
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unvoiced_track_is_inactive() {
        let p = vec![None; 10];
        assert!(detect_voice_activity(&p, &[1.0; 10], 0.1).iter().all(|v| *v == 0));
    }

    #[test]
    fn voiced_uniform_energy_is_active() {
        let p = vec![Some(200.0); 10];
        assert!(detect_voice_activity(&p, &[0.5; 10], 0.1).iter().all(|v| *v == 1));
    }

    #[test]
    fn quiet_voiced_frames_are_inactive() {
        let p = vec![Some(200.0); 5];
        let e = [1.0, 1.0, 0.01, 1.0, 1.0];
        assert_eq!(detect_voice_activity(&p, &e, 0.1), vec![1, 1, 0, 1, 1]);
    }
}
