//! Synthetic datasets: an oscillating endmember observed through linear
//! mixtures (scenario A) and illumination-driven reflectance changes through
//! the simplified Hapke model (scenario B).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AbundanceMatrix, AugmentedState, Dynamics, EndmemberMatrix, ImageSequence, LinearSecondOrder,
    SpectralSeries, Spectrum,
};
use crate::scalar::{lit, to_f64, Real};

/// Smooth random reflectance spectrum in `[0.05, 0.95]`.
///
/// A positive mixture of 3 to 6 Gaussian bumps over the band axis plus a
/// constant offset, clipped.
pub fn synth_spectrum<T: Real, R: Rng + ?Sized>(rng: &mut R, bands: usize) -> Spectrum<T> {
    let bands = bands.max(1);
    let n_bumps = rng.random_range(3..=6);
    let offset: f64 = rng.random_range(0.05..0.3);
    let span = bands as f64;
    let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let center = rng.random_range(-0.1..1.1) * span;
            let width = rng.random_range(0.05..0.3) * span.max(1.0);
            let amp = rng.random_range(0.05..0.4);
            (center, width, amp)
        })
        .collect();
    let values = (0..bands)
        .map(|l| {
            let x = l as f64;
            let v = bumps.iter().fold(offset, |acc, &(c, w, a)| {
                acc + a * (-0.5 * ((x - c) / w).powi(2)).exp()
            });
            lit::<T>(v.clamp(0.05, 0.95))
        })
        .collect();
    Spectrum::new(values).expect("synthetic spectrum is finite")
}

/// `n` independent Dirichlet(`alpha`) columns.
pub fn sample_dirichlet<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    alpha: &[f64],
    n: usize,
) -> Result<AbundanceMatrix<T>> {
    if alpha.is_empty() {
        return Err(Error::InvalidParameter("empty Dirichlet concentration".into()));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Dirichlet concentration must be positive, got {a}"
        )));
    }
    let p = alpha.len();
    let mut m = DMatrix::<T>::zeros(p, n);
    if p == 1 {
        m.fill(T::one());
        return AbundanceMatrix::new(m);
    }
    let gammas: Vec<Gamma<f64>> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("validated shape"))
        .collect();
    let mut draw = vec![0.0; p];
    for j in 0..n {
        loop {
            for (d, g) in draw.iter_mut().zip(&gammas) {
                *d = g.sample(rng);
            }
            let s: f64 = draw.iter().sum();
            if s > 0.0 && s.is_finite() {
                for (i, d) in draw.iter().enumerate() {
                    m[(i, j)] = lit(d / s);
                }
                break;
            }
        }
    }
    AbundanceMatrix::new(m)
}

/// Adds white Gaussian noise at `snr_db` relative to the mean signal power.
///
/// Returns the noisy matrix and the noise standard deviation used.
pub fn add_awgn_snr<T: Real, R: Rng + ?Sized>(
    signal: &DMatrix<T>,
    snr_db: f64,
    rng: &mut R,
) -> Result<(DMatrix<T>, T)> {
    if snr_db.is_nan() {
        return Err(Error::InvalidParameter("SNR is NaN".into()));
    }
    if signal.is_empty() {
        return Err(Error::Shape("empty signal".into()));
    }
    let power = signal.iter().map(|v| to_f64(*v).powi(2)).sum::<f64>() / signal.len() as f64;
    if power == 0.0 {
        return Err(Error::InvalidParameter(
            "SNR undefined for an all-zero signal".into(),
        ));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    if sigma == 0.0 {
        return Ok((signal.clone(), T::zero()));
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let noisy = signal.map(|v| v + lit::<T>(normal.sample(rng)));
    Ok((noisy, lit(sigma)))
}

/// SNR fields: an infinite SNR (noiseless) is written as `null`.
mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn default_seed() -> u64 {
    0
}

/// Configuration of the oscillating-endmember dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioAConfig {
    pub bands: usize,
    pub endmembers: usize,
    pub pixels: usize,
    pub frames: usize,
    pub beta: f64,
    /// Frame interval.
    pub dt: f64,
    /// `null` in JSON means noiseless.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    /// Dirichlet concentration; `None` means all ones.
    pub dirichlet_alpha: Option<Vec<f64>>,
    pub variable_endmember: usize,
    /// Scale of the initial variable part relative to a synthetic spectrum.
    pub variation_amplitude: f64,
    /// Initial velocity std as a fraction of the std of the initial variable part.
    pub velocity_scale: f64,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
}

impl Default for ScenarioAConfig {
    fn default() -> Self {
        Self {
            bands: 224,
            endmembers: 3,
            pixels: 500,
            frames: 20,
            beta: -0.1,
            dt: 1.0,
            snr_db: 20.0,
            dirichlet_alpha: None,
            variable_endmember: 0,
            variation_amplitude: 0.1,
            velocity_scale: 0.1,
            rng_seed: 0,
        }
    }
}

impl ScenarioAConfig {
    pub fn alpha(&self) -> Vec<f64> {
        self.dirichlet_alpha
            .clone()
            .unwrap_or_else(|| vec![1.0; self.endmembers])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.bands == 0 || self.endmembers == 0 || self.pixels == 0 || self.frames == 0 {
            return bad("bands, endmembers, pixels and frames must all be >= 1");
        }
        if self.snr_db.is_nan() {
            return bad("snr_db must not be NaN");
        }
        if !self.beta.is_finite() || !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("beta must be finite and dt > 0");
        }
        let alpha = self.alpha();
        if alpha.len() != self.endmembers {
            return bad("dirichlet_alpha length must equal endmembers");
        }
        if alpha.iter().any(|a| !(*a > 0.0)) {
            return bad("dirichlet_alpha entries must be > 0");
        }
        if self.variable_endmember >= self.endmembers {
            return Err(Error::InvalidParameter(format!(
                "variable endmember {} out of range for {} endmembers",
                self.variable_endmember, self.endmembers
            )));
        }
        if !(self.variation_amplitude >= 0.0) || !(self.velocity_scale >= 0.0) {
            return bad("variation_amplitude and velocity_scale must be >= 0");
        }
        Ok(())
    }
}

/// Output of [`generate_scenario_a`].
#[derive(Debug, Clone)]
pub struct ScenarioA<T: Real> {
    pub images: ImageSequence<T>,
    /// Noiseless endmember trajectory.
    pub truth: SpectralSeries<T>,
    pub abundances: AbundanceMatrix<T>,
    /// Constant part of the variable endmember.
    pub mean: Spectrum<T>,
    /// Initial (position, velocity) of the variable part.
    pub initial: AugmentedState<T>,
}

/// One oscillating endmember around a constant spectrum, all others constant,
/// mixed linearly with Dirichlet abundances and observed in white noise.
pub fn generate_scenario_a<T: Real>(cfg: &ScenarioAConfig) -> Result<ScenarioA<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let (l, p) = (cfg.bands, cfg.endmembers);
    let base: Vec<Spectrum<T>> = (0..p).map(|_| synth_spectrum(&mut rng, l)).collect();
    let mean = base[cfg.variable_endmember].clone();

    let shape: Spectrum<T> = synth_spectrum(&mut rng, l);
    let pos0 = shape.values() * lit::<T>(cfg.variation_amplitude);
    let pos_f64: Vec<f64> = pos0.iter().map(|v| to_f64(*v)).collect();
    let m = pos_f64.iter().sum::<f64>() / l as f64;
    let std = (pos_f64.iter().map(|v| (v - m).powi(2)).sum::<f64>() / l as f64).sqrt();
    let vel_std = cfg.velocity_scale * std;
    let vel0 = DVector::from_fn(l, |_, _| {
        if vel_std > 0.0 {
            lit::<T>(Normal::new(0.0, vel_std).expect("finite std").sample(&mut rng))
        } else {
            T::zero()
        }
    });
    let initial = AugmentedState::new(pos0, vel0)?;

    let abundances: AbundanceMatrix<T> = sample_dirichlet(&mut rng, &cfg.alpha(), cfg.pixels)?;
    let dynamics = LinearSecondOrder::new(lit::<T>(cfg.beta), lit::<T>(cfg.dt))?;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut images = Vec::with_capacity(cfg.frames);
    let mut sigmas = Vec::with_capacity(cfg.frames);
    let mut timestamps = Vec::with_capacity(cfg.frames);
    let mut x = initial.to_vector();
    for t in 0..cfg.frames {
        if t > 0 {
            x = dynamics.step(&x)?;
        }
        let mut spectra = base.clone();
        spectra[cfg.variable_endmember] =
            Spectrum::from_vector(mean.values() + x.rows(0, l))?;
        let s_t = EndmemberMatrix::from_spectra(&spectra)?;
        let clean = s_t.matrix() * abundances.matrix();
        let (noisy, sigma) = add_awgn_snr(&clean, cfg.snr_db, &mut rng)?;
        frames.push(s_t);
        images.push(noisy);
        sigmas.push(sigma);
        timestamps.push(lit::<T>(t as f64 * cfg.dt));
    }
    Ok(ScenarioA {
        images: ImageSequence::new(images, sigmas, timestamps.clone())?,
        truth: SpectralSeries::new(frames, timestamps)?,
        abundances,
        mean,
        initial,
    })
}

/// Single-scattering albedo per band, each value in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoSpectrum<T: Real> {
    values: DVector<T>,
}

impl<T: Real> AlbedoSpectrum<T> {
    pub fn new(values: DVector<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("albedo spectrum must be non-empty".into()));
        }
        if let Some(band) = values
            .iter()
            .position(|w| !(*w > T::zero() && *w <= T::one()))
        {
            return Err(Error::InvalidParameter(format!(
                "albedo {} at band {band} outside (0, 1)",
                values[band]
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DVector<T> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_cosine<T: Real>(c: T, name: &str) -> Result<()> {
    if c > T::zero() && c <= T::one() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {c} outside (0, 1]")))
    }
}

/// Simplified Hapke reflectance `w / ((1 + 2 mu sqrt(1-w)) (1 + 2 mu0 sqrt(1-w)))`.
pub fn hapke_forward<T: Real>(omega: &AlbedoSpectrum<T>, mu: T, mu0: T) -> Result<Spectrum<T>> {
    check_cosine(mu, "mu")?;
    check_cosine(mu0, "mu0")?;
    let two: T = lit(2.0);
    let values = omega.values.map(|w| {
        let x = (T::one() - w).sqrt();
        w / ((T::one() + two * mu * x) * (T::one() + two * mu0 * x))
    });
    Spectrum::from_vector(values)
}

/// Exact inverse of [`hapke_forward`] per band.
///
/// With `x = sqrt(1 - w)` the forward model becomes the quadratic
/// `(4 r mu mu0 + 1) x^2 + 2 r (mu + mu0) x + (r - 1) = 0`, whose unique
/// root in `[0, 1]` is taken in cancellation-free form.
pub fn hapke_invert<T: Real>(reflectance: &Spectrum<T>, mu: T, mu0: T) -> Result<AlbedoSpectrum<T>> {
    check_cosine(mu, "mu")?;
    check_cosine(mu0, "mu0")?;
    let (one, two, four) = (T::one(), lit::<T>(2.0), lit::<T>(4.0));
    let mut out = DVector::zeros(reflectance.len());
    for (band, &r) in reflectance.values().iter().enumerate() {
        if !(r > T::zero() && r < one) {
            return Err(Error::HapkeNoRoot { band });
        }
        let a = four * r * mu * mu0 + one;
        let b = two * r * (mu + mu0);
        let c = r - one;
        let disc = b * b - four * a * c;
        // c < 0 so disc > b^2 and exactly one root is positive.
        let x = -two * c / (b + disc.sqrt());
        if !(x >= T::zero() && x <= one) {
            return Err(Error::HapkeNoRoot { band });
        }
        out[band] = one - x * x;
    }
    AlbedoSpectrum::new(out).map_err(|_| Error::HapkeNoRoot {
        band: reflectance.len(),
    })
}

/// How the solar incidence angle evolves over the day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleLaw {
    /// `theta0(t) = cos(2 pi t / tau)` in radians.
    Literal,
    /// `theta0(t) = theta_amp * cos(2 pi t / tau)` with `theta_amp` in degrees.
    Scaled,
}

/// Configuration of the illumination-driven dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioBConfig {
    pub bands: usize,
    pub endmembers: usize,
    pub frames: usize,
    pub train_frames: usize,
    pub emergence_deg: f64,
    pub tau_hours: f64,
    pub duration_hours: f64,
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    /// Pixels of the optional mixed image sequence.
    pub pixels: usize,
    pub angle_law: AngleLaw,
    pub theta_amp_deg: f64,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
}

impl Default for ScenarioBConfig {
    fn default() -> Self {
        Self {
            bands: 224,
            endmembers: 4,
            frames: 30,
            train_frames: 20,
            emergence_deg: 30.0,
            tau_hours: 24.0,
            duration_hours: 3.0,
            snr_db: 30.0,
            pixels: 500,
            angle_law: AngleLaw::Literal,
            theta_amp_deg: 60.0,
            rng_seed: 0,
        }
    }
}

impl ScenarioBConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.bands == 0 || self.endmembers == 0 || self.frames < 2 || self.pixels == 0 {
            return bad("bands, endmembers, pixels >= 1 and frames >= 2 required".into());
        }
        if self.train_frames == 0 || self.train_frames >= self.frames {
            return bad(format!(
                "train_frames must be in 1..frames, got {} of {}",
                self.train_frames, self.frames
            ));
        }
        if !(0.0..90.0).contains(&self.emergence_deg) {
            return bad(format!("emergence angle {} outside [0, 90)", self.emergence_deg));
        }
        if !(self.tau_hours > 0.0) || !(self.duration_hours > 0.0) {
            return bad("tau_hours and duration_hours must be > 0".into());
        }
        if self.snr_db.is_nan() {
            return bad("snr_db must not be NaN".into());
        }
        if self.angle_law == AngleLaw::Scaled && !(self.theta_amp_deg.abs() < 90.0) {
            return bad(format!("theta_amp_deg {} must be below 90", self.theta_amp_deg));
        }
        Ok(())
    }

    /// Sampling times in hours: `frames` equally spaced points over `[0, duration]`.
    pub fn times(&self) -> Vec<f64> {
        let n = self.frames;
        (0..n)
            .map(|i| self.duration_hours * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Incidence angle in radians at time `t` hours.
    pub fn incidence(&self, t: f64) -> f64 {
        let phase = (2.0 * std::f64::consts::PI * t / self.tau_hours).cos();
        match self.angle_law {
            AngleLaw::Literal => phase,
            AngleLaw::Scaled => self.theta_amp_deg.to_radians() * phase,
        }
    }

    pub fn mu(&self) -> f64 {
        self.emergence_deg.to_radians().cos()
    }
}

/// Output of [`generate_scenario_b`].
#[derive(Debug, Clone)]
pub struct ScenarioB<T: Real> {
    /// Noiseless pure-pixel reflectance trajectory, `L x P` per frame.
    pub series: SpectralSeries<T>,
    pub train: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
    /// Incidence angle (radians) per frame.
    pub incidence: Vec<T>,
    pub mu0: Vec<T>,
    pub images: Option<ImageSequence<T>>,
}

/// Draws `P` synthetic reflectance spectra and inverts them to albedos at the
/// geometry of the first frame.
pub fn synth_albedos<T: Real>(cfg: &ScenarioBConfig) -> Result<Vec<AlbedoSpectrum<T>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_a1be_d0);
    let mu = lit::<T>(cfg.mu());
    let mu0 = lit::<T>(cfg.incidence(0.0).cos());
    (0..cfg.endmembers)
        .map(|_| hapke_invert(&synth_spectrum::<T, _>(&mut rng, cfg.bands), mu, mu0))
        .collect()
}

/// Reflectance of every material under a changing incidence angle and fixed
/// emergence angle, optionally mixed into noisy images.
pub fn generate_scenario_b<T: Real>(
    cfg: &ScenarioBConfig,
    albedos: &[AlbedoSpectrum<T>],
    abundances: Option<&AbundanceMatrix<T>>,
) -> Result<ScenarioB<T>> {
    cfg.validate()?;
    if albedos.len() != cfg.endmembers {
        return Err(Error::Shape(format!(
            "{} albedo spectra for {} endmembers",
            albedos.len(),
            cfg.endmembers
        )));
    }
    if let Some(a) = albedos.iter().find(|a| a.len() != cfg.bands) {
        return Err(Error::Shape(format!(
            "albedo spectrum with {} bands, expected {}",
            a.len(),
            cfg.bands
        )));
    }
    let mu = lit::<T>(cfg.mu());
    let times = cfg.times();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut incidence = Vec::with_capacity(cfg.frames);
    let mut mu0s = Vec::with_capacity(cfg.frames);
    for &t in &times {
        let theta0 = cfg.incidence(t);
        let mu0 = theta0.cos();
        if !(mu0 > 0.0 && mu0 <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "incidence angle {theta0} rad at t = {t} h is not illuminating"
            )));
        }
        let mu0 = lit::<T>(mu0);
        let spectra = albedos
            .iter()
            .map(|w| hapke_forward(w, mu, mu0))
            .collect::<Result<Vec<_>>>()?;
        frames.push(EndmemberMatrix::from_spectra(&spectra)?);
        incidence.push(lit::<T>(theta0));
        mu0s.push(mu0);
    }
    let timestamps: Vec<T> = times.iter().map(|t| lit::<T>(*t)).collect();
    let series = SpectralSeries::new(frames, timestamps.clone())?;

    let images = match abundances {
        None => None,
        Some(a) => {
            if a.endmembers() != cfg.endmembers {
                return Err(Error::Shape(format!(
                    "abundances for {} endmembers, expected {}",
                    a.endmembers(),
                    cfg.endmembers
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            let mut imgs = Vec::with_capacity(cfg.frames);
            let mut sigmas = Vec::with_capacity(cfg.frames);
            for f in series.frames() {
                let (noisy, sigma) = add_awgn_snr(&(f.matrix() * a.matrix()), cfg.snr_db, &mut rng)?;
                imgs.push(noisy);
                sigmas.push(sigma);
            }
            Some(ImageSequence::new(imgs, sigmas, timestamps)?)
        }
    };

    Ok(ScenarioB {
        series,
        train: 0..cfg.train_frames,
        test: cfg.train_frames..cfg.frames,
        incidence,
        mu0: mu0s,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn noiseless_snr_roundtrips_as_null() {
        let cfg = ScenarioAConfig {
            snr_db: f64::INFINITY,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""snr_db":null"#));
        assert_eq!(serde_json::from_str::<ScenarioAConfig>(&text).unwrap(), cfg);
        let b: ScenarioBConfig = serde_json::from_str(r#"{"snr_db": 12.5}"#).unwrap();
        assert_eq!(b.snr_db, 12.5);
    }

    #[test]
    fn synth_spectrum_contract() {
        let a: Spectrum<f64> = synth_spectrum(&mut rng(3), 224);
        let b: Spectrum<f64> = synth_spectrum(&mut rng(3), 224);
        let c: Spectrum<f64> = synth_spectrum(&mut rng(4), 224);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.values().min() >= 0.05 && a.values().max() <= 0.95);
        let one: Spectrum<f32> = synth_spectrum(&mut rng(1), 1);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn dirichlet_contract() {
        let a: AbundanceMatrix<f64> = sample_dirichlet(&mut rng(0), &[1.0, 1.0, 1.0], 200).unwrap();
        assert!(a.matrix().iter().all(|v| *v >= 0.0));
        for col in a.matrix().column_iter() {
            assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-12);
        }
        let single: AbundanceMatrix<f64> = sample_dirichlet(&mut rng(0), &[2.5], 10).unwrap();
        assert!(single.matrix().iter().all(|v| *v == 1.0));
        assert!(sample_dirichlet::<f64, _>(&mut rng(0), &[1.0, 0.0], 3).is_err());
        assert!(sample_dirichlet::<f64, _>(&mut rng(0), &[1.0, -2.0], 3).is_err());
    }

    #[test]
    fn dirichlet_mean_concentrated() {
        let a: AbundanceMatrix<f64> = sample_dirichlet(&mut rng(9), &[1e6, 1e6], 5000).unwrap();
        let mean = a.matrix().column_mean();
        assert_abs_diff_eq!(mean[0], 0.5, epsilon = 0.01);
        assert_abs_diff_eq!(mean[1], 0.5, epsilon = 0.01);
    }

    #[test]
    fn dirichlet_mean_asymmetric() {
        // Mean of Dirichlet(alpha) is alpha / sum(alpha).
        let a: AbundanceMatrix<f64> = sample_dirichlet(&mut rng(2), &[1.0, 2.0, 5.0], 40_000).unwrap();
        let mean = a.matrix().column_mean();
        for (m, e) in mean.iter().zip([0.125, 0.25, 0.625]) {
            assert_abs_diff_eq!(*m, e, epsilon = 0.005);
        }
    }

    #[test]
    fn awgn_snr_is_calibrated() {
        let signal = DMatrix::from_fn(1000, 1000, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0 + 0.1);
        let (noisy, sigma) = add_awgn_snr(&signal, 20.0, &mut rng(5)).unwrap();
        let ps = signal.iter().map(|v| v * v).sum::<f64>() / 1e6;
        assert_abs_diff_eq!(ps / (sigma * sigma), 100.0, epsilon = 1e-9);
        let noise = &noisy - &signal;
        let pn = noise.iter().map(|v| v * v).sum::<f64>() / 1e6;
        let snr = 10.0 * (ps / pn).log10();
        assert!((snr - 20.0).abs() < 0.1, "empirical SNR {snr}");
        let emp_sigma = pn.sqrt();
        assert!((emp_sigma / sigma - 1.0).abs() < 0.02);
    }

    #[test]
    fn awgn_limits() {
        let signal = DMatrix::from_element(3, 4, 0.3);
        let (noisy, _) = add_awgn_snr(&signal, 300.0, &mut rng(1)).unwrap();
        assert!((&noisy - &signal).amax() < 1e-12);
        assert!(add_awgn_snr(&DMatrix::<f64>::zeros(2, 2), 20.0, &mut rng(1)).is_err());
    }

    #[test]
    fn scenario_a_noiseless_consistency() {
        let cfg = ScenarioAConfig {
            bands: 30,
            pixels: 80,
            snr_db: 300.0,
            ..Default::default()
        };
        let sc = generate_scenario_a::<f64>(&cfg).unwrap();
        assert_eq!(sc.images.len(), 20);
        let mut worst = 0.0f64;
        for t in 0..sc.images.len() {
            let y = sc.images.frame(t);
            let r = y - sc.truth.frame(t).matrix() * sc.abundances.matrix();
            worst = worst.max(r.norm() / y.norm());
        }
        assert!(worst < 1e-8);
    }

    #[test]
    fn scenario_a_trajectory_follows_closed_form() {
        let cfg = ScenarioAConfig {
            bands: 25,
            pixels: 10,
            ..Default::default()
        };
        let sc = generate_scenario_a::<f64>(&cfg).unwrap();
        let w = 0.1f64.sqrt();
        let p = cfg.variable_endmember;
        for (t, s) in sc.truth.trajectory(p).iter().enumerate() {
            let var = s - sc.mean.values();
            let tt = t as f64;
            let expect = &sc.initial.position * (w * tt).cos() + &sc.initial.velocity * ((w * tt).sin() / w);
            assert!((var - expect).amax() < 1e-12, "frame {t}");
        }
        for q in 0..cfg.endmembers {
            if q == p {
                continue;
            }
            let tr = sc.truth.trajectory(q);
            assert!(tr.iter().all(|s| *s == tr[0]));
        }
    }

    #[test]
    fn scenario_a_recursion_has_zero_residual() {
        let cfg = ScenarioAConfig {
            bands: 12,
            pixels: 5,
            ..Default::default()
        };
        let sc = generate_scenario_a::<f64>(&cfg).unwrap();
        let d = LinearSecondOrder::new(-0.1, 1.0).unwrap();
        let mut x = sc.initial.to_vector();
        for s in sc.truth.trajectory(0) {
            assert_eq!(&(sc.mean.values() + x.rows(0, 12)), &s);
            x = d.step(&x).unwrap();
        }
    }

    #[test]
    fn scenario_a_noise_sigma_matches_empirical() {
        let cfg = ScenarioAConfig {
            bands: 224,
            pixels: 500,
            frames: 3,
            ..Default::default()
        };
        let sc = generate_scenario_a::<f64>(&cfg).unwrap();
        for t in 0..3 {
            let noise = sc.images.frame(t) - sc.truth.frame(t).matrix() * sc.abundances.matrix();
            let emp = (noise.norm_squared() / noise.len() as f64).sqrt();
            let sigma = sc.images.noise_sigma()[t];
            assert!((emp / sigma - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn scenario_a_reproducible_and_validated() {
        let cfg = ScenarioAConfig {
            bands: 10,
            pixels: 20,
            frames: 4,
            rng_seed: 11,
            ..Default::default()
        };
        let a = generate_scenario_a::<f64>(&cfg).unwrap();
        let b = generate_scenario_a::<f64>(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        let bad = ScenarioAConfig {
            variable_endmember: 3,
            ..cfg
        };
        assert!(generate_scenario_a::<f64>(&bad).is_err());
    }

    #[test]
    fn hapke_spot_values() {
        let mu = 30f64.to_radians().cos();
        let w = AlbedoSpectrum::new(DVector::from_row_slice(&[0.5, 1.0 - 1e-12])).unwrap();
        let r = hapke_forward(&w, mu, mu).unwrap();
        let direct = 0.5 / (1.0 + 2.0 * mu * 0.5f64.sqrt()).powi(2);
        assert_abs_diff_eq!(r.values()[0], direct, epsilon = 1e-15);
        assert_abs_diff_eq!(r.values()[0], 0.10102, epsilon = 1e-5);
        assert_abs_diff_eq!(r.values()[1], 1.0, epsilon = 1e-5);
        let back = hapke_invert(&Spectrum::new(vec![direct, 1.0 - 1e-9]).unwrap(), mu, mu).unwrap();
        assert_abs_diff_eq!(back.values()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(back.values()[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn hapke_monotone_in_albedo() {
        let grid = DVector::from_fn(999, |i, _| (i + 1) as f64 / 1000.0);
        for (mu, mu0) in [(0.866, 0.5), (1.0, 1.0), (0.2, 0.9)] {
            let r = hapke_forward(&AlbedoSpectrum::new(grid.clone()).unwrap(), mu, mu0).unwrap();
            assert!(r.values().as_slice().windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn hapke_rejects_bad_inputs() {
        assert!(AlbedoSpectrum::new(DVector::from_row_slice(&[0.0])).is_err());
        assert!(AlbedoSpectrum::new(DVector::from_row_slice(&[1.2])).is_err());
        let w = AlbedoSpectrum::new(DVector::from_row_slice(&[0.5])).unwrap();
        assert!(hapke_forward(&w, 0.0, 0.5).is_err());
        let r = Spectrum::new(vec![0.3, 1.2, 0.4]).unwrap();
        assert!(matches!(
            hapke_invert(&r, 0.8, 0.8),
            Err(Error::HapkeNoRoot { band: 1 })
        ));
    }

    #[test]
    fn scenario_b_shape_and_geometry() {
        let cfg = ScenarioBConfig {
            bands: 40,
            ..Default::default()
        };
        let albedos = synth_albedos::<f64>(&cfg).unwrap();
        let abund = sample_dirichlet(&mut rng(1), &[1.0; 4], 100).unwrap();
        let sc = generate_scenario_b(&cfg, &albedos, Some(&abund)).unwrap();
        assert_eq!(sc.series.len(), 30);
        assert_eq!(sc.train, 0..20);
        assert_eq!(sc.test, 20..30);
        assert_abs_diff_eq!(sc.incidence[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sc.mu0[0], 1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(*sc.series.timestamps().last().unwrap(), 3.0, epsilon = 1e-12);
        let mu = cfg.mu();
        for (t, f) in sc.series.frames().iter().enumerate() {
            assert!(f.matrix().iter().all(|v| *v > 0.0 && *v < 1.0));
            // Every material shares the same illumination: re-inverting each
            // column with this frame's mu0 recovers the fixed albedo.
            for (p, w) in albedos.iter().enumerate() {
                let back = hapke_invert(&f.column(p), mu, sc.mu0[t]).unwrap();
                assert!((back.values() - w.values()).amax() < 1e-10);
            }
        }
        assert_eq!(sc.images.unwrap().len(), 30);
    }

    #[test]
    fn scenario_b_scaled_law() {
        let cfg = ScenarioBConfig {
            bands: 5,
            angle_law: AngleLaw::Scaled,
            theta_amp_deg: 45.0,
            ..Default::default()
        };
        assert_abs_diff_eq!(cfg.incidence(0.0), 45f64.to_radians(), epsilon = 1e-15);
        let albedos = synth_albedos::<f64>(&cfg).unwrap();
        let sc = generate_scenario_b(&cfg, &albedos, None).unwrap();
        assert!(sc.images.is_none());
        let bad = ScenarioBConfig {
            theta_amp_deg: 95.0,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = ScenarioBConfig {
            train_frames: 30,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn hapke_roundtrip(w in 0.01f64..0.99, mu in 0.05f64..1.0, mu0 in 0.05f64..1.0) {
            let a = AlbedoSpectrum::new(DVector::from_row_slice(&[w])).unwrap();
            let r = hapke_forward(&a, mu, mu0).unwrap();
            let back = hapke_invert(&r, mu, mu0).unwrap();
            prop_assert!((back.values()[0] - w).abs() < 1e-10);
        }
    }
}
