//! Closed-world registries turning a config into library objects.

use std::sync::Arc;

use pathbismut::bismut::{Direction, EstimateOptions, Flavor, RunSpec, TestFunctional};
use pathbismut::mkv_solver::InitialSampler;
use pathbismut::models::{
    hamiltonian_model, linear_meanfield_delay_model, tanh_noise_delay_model, Coefficients,
    HamiltonianParams, LinearDelayParams, LinearFirstBlock, LinearSecondBlock,
};
use pathbismut::pathspace::make_grid;

use crate::config::{DirectionConfig, ExperimentConfig, FunctionalConfig, InitConfig, ModelConfig};
use crate::error::CliError;

/// A validated experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Box<dyn Coefficients>,
    pub run: RunSpec,
    pub functional: TestFunctional,
    pub direction: Direction,
    pub flavor: Flavor,
    pub options: EstimateOptions,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("name", &self.config.name)
            .finish()
    }
}

fn check_len(path: &str, got: usize, want: usize) -> Result<(), CliError> {
    if got != want {
        return Err(CliError::invalid(
            path,
            format!("expected {want} values, got {got}"),
        ));
    }
    Ok(())
}

fn check_finite(path: &str, values: &[f64]) -> Result<(), CliError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::invalid(path, "values must be finite"));
    }
    Ok(())
}

pub fn build_model(cfg: &ModelConfig) -> Result<Box<dyn Coefficients>, CliError> {
    match cfg {
        ModelConfig::LinearDelay { a, b1, c, sigma0 } => {
            check_finite("model", &[*a, *b1, *c, *sigma0])?;
            Ok(Box::new(linear_meanfield_delay_model(LinearDelayParams {
                a: *a,
                b1: *b1,
                c: *c,
                sigma0: *sigma0,
            })))
        }
        ModelConfig::TanhNoiseDelay {
            a,
            b1,
            c,
            sigma0,
            sigma1,
        } => {
            check_finite("model", &[*a, *b1, *c, *sigma0, *sigma1])?;
            if sigma1.abs() >= sigma0.abs() {
                return Err(CliError::invalid(
                    "model.sigma1",
                    "|sigma1| must be below |sigma0| to keep the diffusion non-degenerate",
                ));
            }
            Ok(Box::new(tanh_noise_delay_model(
                LinearDelayParams {
                    a: *a,
                    b1: *b1,
                    c: *c,
                    sigma0: *sigma0,
                },
                *sigma1,
            )))
        }
        ModelConfig::HamiltonianLinear {
            l,
            m,
            coupling,
            sigma,
            first_a,
            first_c,
            local,
            delay,
            mean_field,
        } => {
            let (l, m) = (*l, *m);
            if l == 0 {
                return Err(CliError::invalid("model.l", "must be positive"));
            }
            if m == 0 {
                return Err(CliError::invalid("model.m", "must be positive"));
            }
            let d = l + m;
            for (path, v, len) in [
                ("model.coupling", coupling, l * m),
                ("model.sigma", sigma, m * m),
                ("model.first_a", first_a, l * l),
                ("model.first_c", first_c, l * m),
                ("model.local", local, m * d),
                ("model.delay", delay, m * d),
                ("model.mean_field", mean_field, m * d),
            ] {
                check_len(path, v.len(), len)?;
                check_finite(path, v)?;
            }
            let model = hamiltonian_model(HamiltonianParams {
                l,
                m,
                coupling: coupling.clone(),
                sigma: sigma.clone(),
                first: Arc::new(LinearFirstBlock {
                    l,
                    m,
                    a: first_a.clone(),
                    c: first_c.clone(),
                }),
                second: Arc::new(LinearSecondBlock {
                    d,
                    m,
                    local: local.clone(),
                    delay: delay.clone(),
                    mean_field: mean_field.clone(),
                }),
            })
            .map_err(|e| CliError::invalid("model.sigma", e.to_string()))?;
            Ok(Box::new(model))
        }
    }
}

pub fn build_init(cfg: &InitConfig, dim: usize) -> Result<InitialSampler, CliError> {
    match cfg {
        InitConfig::Constant { value } => {
            check_len("init.value", value.len(), dim)?;
            check_finite("init.value", value)?;
            Ok(InitialSampler::constant(value.clone()))
        }
        InitConfig::Gaussian { mean, std } => {
            check_len("init.mean", mean.len(), dim)?;
            check_len("init.std", std.len(), dim)?;
            check_finite("init.mean", mean)?;
            check_finite("init.std", std)?;
            if std.iter().any(|s| *s < 0.0) {
                return Err(CliError::invalid("init.std", "must be non-negative"));
            }
            Ok(InitialSampler::gaussian(mean.clone(), std.clone()))
        }
    }
}

pub fn build_functional(cfg: &FunctionalConfig, dim: usize) -> Result<TestFunctional, CliError> {
    let (component, make): (usize, fn(usize, usize) -> TestFunctional) = match cfg {
        FunctionalConfig::Coordinate { component } => (*component, TestFunctional::coordinate),
        FunctionalConfig::Tanh { component } => (*component, TestFunctional::tanh_coordinate),
        FunctionalConfig::WindowAverage { component } => {
            (*component, TestFunctional::window_average)
        }
    };
    if component >= dim {
        return Err(CliError::invalid(
            "functional.component",
            format!("component {component} out of range for dimension {dim}"),
        ));
    }
    Ok(make(dim, component))
}

pub fn build_direction(cfg: &DirectionConfig, dim: usize) -> Result<Direction, CliError> {
    match cfg {
        DirectionConfig::ConstantShift { shift } => {
            check_len("direction.shift", shift.len(), dim)?;
            check_finite("direction.shift", shift)?;
            Ok(Direction::constant_shift(shift.clone()))
        }
        DirectionConfig::CoordinateScaled { scale } => {
            check_len("direction.scale", scale.len(), dim)?;
            check_finite("direction.scale", scale)?;
            Ok(Direction::coordinate_scaled(scale.clone()))
        }
        DirectionConfig::Affine { matrix, offset } => {
            check_len("direction.matrix", matrix.len(), dim * dim)?;
            check_len("direction.offset", offset.len(), dim)?;
            check_finite("direction.matrix", matrix)?;
            check_finite("direction.offset", offset)?;
            Ok(Direction::affine(matrix.clone(), offset.clone()))
        }
    }
}

/// Names of the model flags a flavor depends on, for error messages.
fn required_flag(flavor: Flavor) -> &'static str {
    match flavor {
        Flavor::AdditiveExact => "additive",
        Flavor::MultiplicativeExact => "sigma_state_only",
        Flavor::HamiltonianExact | Flavor::AsymptoticHamiltonian => "hamiltonian_split",
        Flavor::AsymptoticNondeg => "none",
    }
}

impl Experiment {
    pub fn from_config(config: ExperimentConfig) -> Result<Self, CliError> {
        let grid = make_grid(config.grid.t_end, config.grid.dt, config.grid.r0)
            .map_err(|e| CliError::invalid("grid", e.to_string()))?;
        if config.n < 2 {
            return Err(CliError::invalid("N", "need at least 2 particles"));
        }
        let model = build_model(&config.model)?;
        let dim = model.dim();
        let init = build_init(&config.init, dim)?;
        let functional = build_functional(&config.functional, dim)?;
        let direction = build_direction(&config.direction, dim)?;
        let flavor: Flavor = config
            .flavor
            .parse()
            .map_err(|e: pathbismut::Error| CliError::invalid("flavor", e.to_string()))?;
        flavor.check(model.as_ref()).map_err(|_| {
            CliError::invalid(
                "flavor",
                format!(
                    "{flavor} requires the `{}` model flag, which model {} does not have",
                    required_flag(flavor),
                    model.name()
                ),
            )
        })?;
        let lambda = config.estimator.lambda;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(CliError::invalid(
                "estimator.lambda",
                "must be a finite non-negative number",
            ));
        }
        if !(config.oracles.fd_epsilon > 0.0) {
            return Err(CliError::invalid("oracles.fd_epsilon", "must be positive"));
        }
        let options = EstimateOptions {
            lambda,
            include_remainder: config.estimator.include_remainder,
        };
        let run = RunSpec {
            init,
            grid,
            n: config.n,
            seed: config.seed,
        };
        Ok(Self {
            config,
            model,
            run,
            functional,
            direction,
            flavor,
            options,
        })
    }

    /// Linear delay parameters when the deterministic oracle applies:
    /// linear model, constant direction and `f(xi) = xi(0)`.
    pub fn deterministic_oracle_params(&self) -> Option<(LinearDelayParams, f64)> {
        let ModelConfig::LinearDelay { a, b1, c, sigma0 } = self.config.model else {
            return None;
        };
        let FunctionalConfig::Coordinate { component: 0 } = self.config.functional else {
            return None;
        };
        let shift = self.direction.constant_value()?;
        Some((LinearDelayParams { a, b1, c, sigma0 }, shift[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> ExperimentConfig {
        ExperimentConfig::from_toml(crate::config::tests::OU).unwrap()
    }

    #[test]
    fn builds_ou() {
        let e = Experiment::from_config(ou()).unwrap();
        assert_eq!(e.flavor, Flavor::AdditiveExact);
        assert_eq!(e.run.grid.steps(), 100);
        assert!(e.deterministic_oracle_params().is_some());
    }

    #[test]
    fn flavor_mismatch_names_flag() {
        let mut c = ou();
        c.model = ModelConfig::TanhNoiseDelay {
            a: 1.0,
            b1: 0.0,
            c: 0.0,
            sigma0: 1.0,
            sigma1: 0.25,
        };
        let err = Experiment::from_config(c).unwrap_err();
        match err {
            CliError::ConfigInvalid { path, message } => {
                assert_eq!(path, "flavor");
                assert!(message.contains("additive"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rejects_bad_fields() {
        let mut c = ou();
        c.grid.dt = 0.03;
        assert!(
            matches!(Experiment::from_config(c).unwrap_err(), CliError::ConfigInvalid { path, .. } if path == "grid")
        );
        let mut c = ou();
        c.direction = DirectionConfig::ConstantShift {
            shift: vec![1.0, 2.0],
        };
        assert!(
            matches!(Experiment::from_config(c).unwrap_err(), CliError::ConfigInvalid { path, .. } if path == "direction.shift")
        );
        let mut c = ou();
        c.flavor = "exact".into();
        assert!(
            matches!(Experiment::from_config(c).unwrap_err(), CliError::ConfigInvalid { path, .. } if path == "flavor")
        );
    }
}
