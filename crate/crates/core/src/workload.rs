//! Open-workload request generation.
//!
//! Clients join at `spawn_rate` per second up to `num_clients`. Each client
//! keeps a countdown timer; on every one-second tick a client whose timer has
//! reached zero sends one request to an API drawn from the weight
//! distribution and waits a fresh interval drawn uniformly from
//! `[wait_min, wait_max]`. Overshoot below zero is carried into the next wait,
//! so a client's long-run inter-request time is exactly the mean wait.
//!
//! A client that joins mid-run starts at a random point of its wait cycle
//! (the stationary residual of the wait distribution) instead of firing
//! immediately, which keeps the ramp-up arrival rate at `N(t) / E[wait]`.

use rand::Rng;
use rand_distr::{Distribution, Uniform, WeightedIndex};

use crate::model::{ApiId, ServiceId};
use crate::registry::ScenarioConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestStatus {
    InFlight,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub id: u64,
    pub api: ApiId,
    /// Seconds.
    pub arrival: f64,
    pub status: RequestStatus,
    /// Seconds; when the last cloudlet finished.
    pub completed_at: Option<f64>,
    /// Event-time response in milliseconds (last finish minus arrival).
    pub response_time: Option<f64>,
    /// Maximum path delay in milliseconds.
    pub cp_estimate: Option<f64>,
    pub critical_path: Option<Vec<ServiceId>>,
}

impl Request {
    pub fn new(id: u64, api: ApiId, arrival: f64) -> Self {
        Request {
            id,
            api,
            arrival,
            status: RequestStatus::InFlight,
            completed_at: None,
            response_time: None,
            cp_estimate: None,
            critical_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub num_clients: u64,
    pub spawn_rate: f64,
    pub wait_min: f64,
    pub wait_max: f64,
    pub time_limit: Option<f64>,
    pub num_limit: Option<u64>,
}

impl GeneratorParams {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        GeneratorParams {
            num_clients: cfg.num_clients,
            spawn_rate: cfg.spawn_rate,
            wait_min: cfg.wait_interval[0],
            wait_max: cfg.wait_interval[1],
            time_limit: cfg.time_limit,
            num_limit: cfg.num_limit,
        }
    }

    pub fn mean_wait(&self) -> f64 {
        (self.wait_min + self.wait_max) / 2.0
    }

    /// Clients present at tick `t`: `min(floor(v * t), Nc)`.
    pub fn clients_at(&self, t: f64) -> u64 {
        let grown = (self.spawn_rate * t + 1e-9).floor();
        if grown >= self.num_clients as f64 {
            self.num_clients
        } else {
            grown.max(0.0) as u64
        }
    }
}

/// Closed-form generator predictions at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub clients: f64,
    pub rate: f64,
    pub cumulative: f64,
}

pub fn predict(t: f64, num_clients: f64, spawn_rate: f64, wait_min: f64, wait_max: f64) -> Prediction {
    let span = wait_min + wait_max;
    let clients = num_clients.min(spawn_rate * t);
    let rate = clients * 2.0 / span;
    let ramp_end = num_clients / spawn_rate;
    let cumulative = if t <= ramp_end {
        spawn_rate / span * t * t
    } else {
        2.0 * num_clients / span * t - num_clients * num_clients / (spawn_rate * span)
    };
    Prediction {
        clients,
        rate,
        cumulative,
    }
}

/// Per-client countdown timers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientPool {
    pub waiting: Vec<f64>,
    pub current_clients: u64,
    pub current_num: u64,
}

pub struct RequestGenerator {
    params: GeneratorParams,
    pool: ClientPool,
    apis: WeightedIndex<f64>,
    wait: Uniform<f64>,
    unit: Uniform<f64>,
    exhausted: bool,
}

impl RequestGenerator {
    /// `weights` are the per-API selection weights in API order.
    pub fn new(params: GeneratorParams, weights: &[f64]) -> Self {
        assert!(!weights.is_empty(), "at least one API is required");
        RequestGenerator {
            wait: Uniform::new_inclusive(params.wait_min, params.wait_max),
            unit: Uniform::new(0.0, 1.0),
            apis: WeightedIndex::new(weights).expect("positive weights"),
            params,
            pool: ClientPool::default(),
            exhausted: false,
        }
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn pool(&self) -> &ClientPool {
        &self.pool
    }

    /// Whether a tick at `t` may still emit requests.
    pub fn active_at(&self, t: f64) -> bool {
        !self.exhausted
            && self.params.time_limit.is_none_or(|lim| t < lim)
            && self.params.num_limit.is_none_or(|lim| self.pool.current_num < lim)
    }

    fn limit_reached(&self) -> bool {
        self.params
            .num_limit
            .is_some_and(|lim| self.pool.current_num >= lim)
    }

    /// Residual time to the next firing of a client observed at a random
    /// instant of its wait cycle.
    fn stationary_residual<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (a, b) = (self.params.wait_min, self.params.wait_max);
        // Length-biased cycle length: density proportional to w on [a, b].
        let cycle = if a == b {
            a
        } else {
            (a * a + self.unit.sample(rng) * (b * b - a * a)).sqrt()
        };
        self.unit.sample(rng) * cycle
    }

    /// Run one generation tick at integer time `t`. Returns the new requests,
    /// all with arrival `t`. Does nothing once a limit is reached.
    pub fn tick<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) -> Vec<Request> {
        if !self.active_at(t) {
            self.exhausted = true;
            return Vec::new();
        }
        let target = self.params.clients_at(t);
        while self.pool.current_clients < target {
            let c = self.pool.current_clients;
            let joined_at = (c + 1) as f64 / self.params.spawn_rate;
            let first_fire = joined_at + self.stationary_residual(rng);
            self.pool.waiting.push(first_fire - t);
            self.pool.current_clients += 1;
        }

        let mut out = Vec::new();
        for i in 0..self.pool.current_clients as usize {
            if self.pool.waiting[i] <= 0.0 {
                if self.limit_reached() {
                    break;
                }
                let api = ApiId::from(self.apis.sample(rng));
                out.push(Request::new(self.pool.current_num, api, t));
                self.pool.current_num += 1;
                // this tick already counts toward the next wait
                self.pool.waiting[i] += self.wait.sample(rng) - 1.0;
            } else {
                self.pool.waiting[i] -= 1.0;
            }
        }
        if self.limit_reached() {
            self.exhausted = true;
        }
        out
    }
}

/// Run the generator alone for ticks `0, 1, 2, ...` while it is active and
/// return `(t, clients, requests emitted at t)` per tick.
pub fn run_generator<R: Rng + ?Sized>(
    params: GeneratorParams,
    weights: &[f64],
    rng: &mut R,
    max_ticks: u64,
) -> Vec<(f64, u64, Vec<Request>)> {
    let mut g = RequestGenerator::new(params, weights);
    let mut out = Vec::new();
    for k in 0..max_ticks {
        let t = k as f64;
        if !g.active_at(t) {
            break;
        }
        let reqs = g.tick(t, rng);
        out.push((t, g.pool().current_clients, reqs));
    }
    out
}
