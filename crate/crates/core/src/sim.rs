//! Discrete-time microscopic simulator of one signalized intersection.
//!
//! Vehicles follow a Krauss-style safe-speed rule on a 1 s grid: each tick a
//! vehicle accelerates toward the speed limit unless that would leave it
//! unable to stop, braking at its comfortable deceleration, behind its leader
//! (assumed to brake at the same rate) or before a red stop line. The whole
//! kinematics is parameterized by one [`DynamicsProfile`], so two engines with
//! different profiles form the simulated and the "real" world.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::scenario::{
    Approach, ArrivalProcess, DynamicsProfile, FlowSpec, LaneId, Movement, RoadNetwork, LANES_PER_APPROACH,
    NUM_LANES, NUM_PHASES,
};

/// Speed below which a vehicle counts as queued, m/s.
pub const QUEUE_SPEED: f64 = 0.1;

const EPS: f64 = 1e-9;

/// Does `phase` give green to `lane`?
///
/// Phases: 0 = N/S through+right, 1 = N/S left, 2 = E/W through+right,
/// 3 = E/W left.
pub fn phase_serves(phase: usize, lane: LaneId) -> bool {
    let ns = matches!(lane.approach(), Approach::North | Approach::South);
    let left = lane.movement() == Movement::Left;
    match phase {
        0 => ns && !left,
        1 => ns && left,
        2 => !ns && !left,
        3 => !ns && left,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: u64,
    pub lane: LaneId,
    /// Meters from the lane start; the stop line is at `lane_length`.
    pub position: f64,
    pub speed: f64,
    pub entered_at: f64,
    /// Seconds of startup lag still to serve.
    pub startup_timer: f64,
    pub waiting_seconds: f64,
    hold_ticks: u32,
    launch_scale: Option<f64>,
    /// Too close to stop when its movement lost green; runs the line.
    committed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneState {
    pub id: LaneId,
    /// Front (closest to the stop line) to back.
    pub vehicles: Vec<Vehicle>,
    /// Arrival times of vehicles waiting for room at the lane entrance.
    pub entry_queue: VecDeque<f64>,
}

impl LaneState {
    fn new(id: LaneId) -> Self {
        LaneState { id, vehicles: Vec::new(), entry_queue: VecDeque::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalController {
    pub current_phase: usize,
    pub yellow_remaining: u32,
    pub pending_phase: Option<usize>,
}

impl SignalController {
    /// Phase the intersection is committed to (pending during yellow).
    pub fn committed_phase(&self) -> usize {
        self.pending_phase.unwrap_or(self.current_phase)
    }

    pub fn permits(&self, lane: LaneId) -> bool {
        self.yellow_remaining == 0 && phase_serves(self.current_phase, lane)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitRecord {
    pub id: u64,
    pub entered_at: f64,
    pub exited_at: f64,
    pub waiting_seconds: f64,
}

/// One line of the per-tick trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub clock: u64,
    pub phase: usize,
    pub total_queue: usize,
    pub in_network: usize,
    pub exited: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    /// Simulated seconds elapsed.
    pub clock: u64,
    pub lanes: Vec<LaneState>,
    pub controller: SignalController,
    pub exited: Vec<ExitRecord>,
    pub spawned: u64,
    /// Sum over ticks with vehicles present of `1 - mean_speed / speed_limit`.
    pub delay_sum: f64,
    pub delay_ticks: u64,
    rng: ChaCha8Rng,
    schedule_cursor: usize,
}

/// A running simulation: state plus the parameters that drive it.
#[derive(Debug, Clone)]
pub struct Engine {
    network: RoadNetwork,
    profile: DynamicsProfile,
    flow: FlowSpec,
    yellow_length: u32,
    state: EngineState,
    trace: Option<Vec<TraceRow>>,
}

impl Engine {
    pub fn new(
        network: RoadNetwork,
        profile: DynamicsProfile,
        flow: FlowSpec,
        yellow_length: u32,
        rng: ChaCha8Rng,
    ) -> Self {
        let state = EngineState {
            clock: 0,
            lanes: LaneId::all().map(LaneState::new).collect(),
            controller: SignalController { current_phase: 0, yellow_remaining: 0, pending_phase: None },
            exited: Vec::new(),
            spawned: 0,
            delay_sum: 0.0,
            delay_ticks: 0,
            rng,
            schedule_cursor: 0,
        };
        Engine { network, profile, flow, yellow_length, state, trace: None }
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn profile(&self) -> &DynamicsProfile {
        &self.profile
    }

    pub fn clock(&self) -> u64 {
        self.state.clock
    }

    /// Start recording one [`TraceRow`] per tick.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    /// Trace rows as `clock,phase,total_queue,in_network,exited` lines.
    pub fn trace_csv(&self) -> String {
        let mut out = String::new();
        for r in self.trace.iter().flatten() {
            let _ = writeln!(out, "{},{},{},{},{}", r.clock, r.phase, r.total_queue, r.in_network, r.exited);
        }
        out
    }

    /// Place a vehicle directly, bypassing the arrival process. Test and
    /// example scaffolding; the caller keeps lane ordering valid.
    pub fn insert_vehicle(&mut self, lane: LaneId, position: f64, speed: f64) -> u64 {
        let id = self.state.spawned;
        self.state.spawned += 1;
        let v = Vehicle {
            id,
            lane,
            position,
            speed,
            entered_at: self.state.clock as f64,
            startup_timer: 0.0,
            waiting_seconds: 0.0,
            hold_ticks: 0,
            launch_scale: None,
            committed: false,
        };
        let lane_state = &mut self.state.lanes[lane.0];
        let at = lane_state.vehicles.iter().position(|o| o.position < position).unwrap_or(lane_state.vehicles.len());
        lane_state.vehicles.insert(at, v);
        id
    }

    /// Start the startup lag on a vehicle as if its movement had just been
    /// permitted.
    pub fn start_startup_timer(&mut self, id: u64) {
        let delay = self.profile.startup_delay;
        if let Some(v) = self.state.lanes.iter_mut().flat_map(|l| l.vehicles.iter_mut()).find(|v| v.id == id) {
            arm_startup(v, delay);
        }
    }

    /// Request a phase. Switching inserts `yellow_length` seconds during
    /// which no movement has green.
    pub fn set_phase(&mut self, phase: usize) -> Result<()> {
        if phase >= NUM_PHASES {
            return Err(Error::PhaseOutOfRange(phase));
        }
        let c = &mut self.state.controller;
        if c.yellow_remaining > 0 {
            return Err(Error::PhaseChangeDuringYellow);
        }
        if phase == c.current_phase {
            return Ok(());
        }
        if self.yellow_length == 0 {
            c.current_phase = phase;
        } else {
            c.yellow_remaining = self.yellow_length;
            c.pending_phase = Some(phase);
        }
        Ok(())
    }

    pub fn queue_length(&self, lane: LaneId) -> usize {
        self.state.lanes[lane.0].vehicles.iter().filter(|v| v.speed < QUEUE_SPEED).count()
    }

    pub fn queue_lengths(&self) -> [usize; NUM_LANES] {
        std::array::from_fn(|i| self.queue_length(LaneId(i)))
    }

    pub fn lane_counts(&self) -> [usize; NUM_LANES] {
        std::array::from_fn(|i| self.state.lanes[i].vehicles.len())
    }

    pub fn in_network(&self) -> usize {
        self.state.lanes.iter().map(|l| l.vehicles.len()).sum()
    }

    /// Advance one second.
    pub fn step(&mut self) {
        self.spawn_arrivals();
        let now = self.state.clock;
        let next = now + 1;
        let net = self.network;
        let prof = self.profile;
        let controller = self.state.controller;
        let mut exits = Vec::new();

        for lane in &mut self.state.lanes {
            let permitted = controller.permits(lane.id);
            // (new position, new speed) of the vehicle just processed.
            let mut leader: Option<(f64, f64)> = None;
            let mut keep = Vec::with_capacity(lane.vehicles.len());
            for mut v in lane.vehicles.drain(..) {
                let (pos, speed, exited) = advance(&mut v, leader, permitted, &net, &prof);
                if speed < QUEUE_SPEED {
                    v.waiting_seconds += 1.0;
                }
                leader = Some((pos, speed));
                if exited {
                    exits.push(ExitRecord {
                        id: v.id,
                        entered_at: v.entered_at,
                        exited_at: next as f64,
                        waiting_seconds: v.waiting_seconds,
                    });
                } else {
                    v.position = pos;
                    v.speed = speed;
                    keep.push(v);
                }
            }
            lane.vehicles = keep;
        }
        self.state.exited.extend(exits);
        self.state.clock = next;
        self.insert_waiting();

        let c = &mut self.state.controller;
        if c.yellow_remaining > 0 {
            c.yellow_remaining -= 1;
            if c.yellow_remaining == 0 {
                c.current_phase = c.pending_phase.take().expect("pending phase during yellow");
            }
        }

        let n = self.in_network();
        if n > 0 {
            let mean_speed: f64 =
                self.state.lanes.iter().flat_map(|l| &l.vehicles).map(|v| v.speed).sum::<f64>() / n as f64;
            self.state.delay_sum += 1.0 - mean_speed / self.network.speed_limit;
            self.state.delay_ticks += 1;
        }
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRow {
                clock: next,
                phase: self.state.controller.committed_phase(),
                total_queue: LaneId::all().map(|l| self.state.lanes[l.0].vehicles.iter().filter(|v| v.speed < QUEUE_SPEED).count()).sum(),
                in_network: n,
                exited: self.state.exited.len(),
            });
        }
    }

    fn spawn_arrivals(&mut self) {
        let t0 = self.state.clock as f64;
        let t1 = t0 + 1.0;
        if t0 >= self.flow.horizon {
            return;
        }
        match &self.flow.process {
            ArrivalProcess::Poisson { rates } => {
                for (approach, &rate) in rates.iter().enumerate() {
                    if rate <= 0.0 {
                        continue;
                    }
                    let count = Poisson::new(rate).expect("positive rate").sample(&mut self.state.rng) as usize;
                    for _ in 0..count {
                        let lane = approach * LANES_PER_APPROACH + self.state.rng.random_range(0..LANES_PER_APPROACH);
                        self.state.lanes[lane].entry_queue.push_back(t0);
                    }
                }
            }
            ArrivalProcess::Schedule(arrivals) => {
                while let Some(a) = arrivals.get(self.state.schedule_cursor) {
                    if a.time >= t1 {
                        break;
                    }
                    self.state.lanes[a.lane().0].entry_queue.push_back(a.time);
                    self.state.schedule_cursor += 1;
                }
            }
        }
    }

    /// Move at most one waiting vehicle per lane into the network.
    fn insert_waiting(&mut self) {
        let now = self.state.clock as f64;
        let net = self.network;
        let decel = self.profile.decel;
        for lane in &mut self.state.lanes {
            if lane.entry_queue.is_empty() {
                continue;
            }
            if let Some(last) = lane.vehicles.last() {
                if last.position - net.vehicle_length - net.min_gap < 0.0 {
                    continue;
                }
            }
            let speed = insertion_speed(lane.vehicles.last(), &net, decel);
            lane.entry_queue.pop_front();
            let id = self.state.spawned;
            self.state.spawned += 1;
            lane.vehicles.push(Vehicle {
                id,
                lane: lane.id,
                position: 0.0,
                speed,
                entered_at: now,
                startup_timer: 0.0,
                waiting_seconds: 0.0,
                hold_ticks: 0,
                launch_scale: None,
                committed: false,
            });
        }
    }

    /// Check the structural invariants of the current state.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let s = &self.state;
        let in_net = self.in_network() as u64;
        if s.spawned != in_net + s.exited.len() as u64 {
            return Err(format!("conservation: spawned {} != {} + {}", s.spawned, in_net, s.exited.len()));
        }
        let c = &s.controller;
        if c.yellow_remaining > self.yellow_length || (c.pending_phase.is_some() != (c.yellow_remaining > 0)) {
            return Err(format!("controller invariant broken: {c:?}"));
        }
        for lane in &s.lanes {
            for v in &lane.vehicles {
                if !(0.0..=self.network.lane_length + EPS).contains(&v.position) {
                    return Err(format!("vehicle {} position {} outside lane", v.id, v.position));
                }
                if !(0.0..=self.network.speed_limit + EPS).contains(&v.speed) {
                    return Err(format!("vehicle {} speed {} outside [0, limit]", v.id, v.speed));
                }
                if v.startup_timer < 0.0 {
                    return Err(format!("vehicle {} negative startup timer", v.id));
                }
            }
            for pair in lane.vehicles.windows(2) {
                if pair[0].position - pair[1].position < self.network.vehicle_length - EPS {
                    return Err(format!(
                        "collision on lane {}: {} at {} and {} at {}",
                        lane.id.0, pair[0].id, pair[0].position, pair[1].id, pair[1].position
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Entry speed at position 0 that keeps the follower constraint satisfiable.
fn insertion_speed(leader: Option<&Vehicle>, net: &RoadNetwork, decel: f64) -> f64 {
    match leader {
        None => net.speed_limit,
        Some(l) => {
            let budget = l.position - net.vehicle_length - net.min_gap + stopping_distance(l.speed, decel);
            net.speed_limit.min(max_safe_speed(budget, decel))
        }
    }
}

fn arm_startup(v: &mut Vehicle, delay: f64) {
    if delay <= 0.0 {
        return;
    }
    v.startup_timer = delay;
    v.hold_ticks = delay.floor() as u32 + 1;
    v.launch_scale = Some(1.0 - delay.fract());
}

/// Distance covered while braking from `v` to rest at `decel` per tick.
pub fn stopping_distance(v: f64, decel: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let n = (v / decel).floor();
    n * v - decel * n * (n + 1.0) / 2.0
}

/// Largest speed `v` with `v + stopping_distance(v) <= budget`.
pub fn max_safe_speed(budget: f64, decel: f64) -> f64 {
    if budget <= 0.0 {
        return 0.0;
    }
    // f(n·b) = b·n(n+1)/2; find the segment containing `budget`.
    let mut n = ((-1.0 + (1.0 + 8.0 * budget / decel).sqrt()) / 2.0).floor().max(0.0);
    while decel * (n + 1.0) * (n + 2.0) / 2.0 <= budget {
        n += 1.0;
    }
    while n > 0.0 && decel * n * (n + 1.0) / 2.0 > budget {
        n -= 1.0;
    }
    (budget + decel * n * (n + 1.0) / 2.0) / (n + 1.0)
}

/// Compute one vehicle's new (position, speed) and whether it leaves the
/// network. `leader` is the already-updated state of the vehicle ahead.
fn advance(
    v: &mut Vehicle,
    leader: Option<(f64, f64)>,
    permitted: bool,
    net: &RoadNetwork,
    prof: &DynamicsProfile,
) -> (f64, f64, bool) {
    let b = prof.decel;
    let mut v_safe = f64::INFINITY;
    if let Some((lpos, lspeed)) = leader {
        let budget = lpos - net.vehicle_length - net.min_gap + stopping_distance(lspeed, b) - v.position;
        v_safe = v_safe.min(max_safe_speed(budget, b));
    }
    if !permitted && !v.committed {
        // Brake for the stop line, harder than `decel` if need be; run it
        // only when even emergency braking cannot stop in time.
        let room = net.lane_length - v.position;
        if max_safe_speed(room, prof.e_decel) < v.speed - prof.e_decel - EPS {
            v.committed = true;
        } else {
            v_safe = v_safe.min(max_safe_speed(room, b));
        }
    }
    if permitted {
        v.committed = false;
    }

    let mut scale = 1.0;
    if v.hold_ticks > 0 {
        v.hold_ticks -= 1;
        v.startup_timer = (v.startup_timer - 1.0).max(0.0);
        return (v.position, 0.0, false);
    }
    if let Some(s) = v.launch_scale.take() {
        scale = s;
    } else if v.speed <= 0.0 && v_safe > EPS && prof.startup_delay > 0.0 {
        arm_startup(v, prof.startup_delay);
        v.hold_ticks -= 1;
        v.startup_timer = (v.startup_timer - 1.0).max(0.0);
        return (v.position, 0.0, false);
    }

    let desired = (v.speed + prof.accel * scale).min(net.speed_limit);
    let mut speed = desired.min(v_safe).max(0.0);
    speed = speed.max(v.speed - prof.e_decel);
    let pos = v.position + speed;
    let exits = (permitted || v.committed) && speed > 0.0 && pos >= net.lane_length;
    (pos, speed, exits)
}
