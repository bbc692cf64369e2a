//! One live run. A driver task owns the [`Runner`]; request handlers see it
//! only through published snapshots, the action mailbox and the event
//! channel.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use autonomy_core::harness::log::{eval_csv, summary_csv, to_jsonl};
use autonomy_core::harness::{EpisodeLog, EvalLog, RunConfig, Runner, StepRecord};
use autonomy_core::protocol::{ActionAck, Event, EventKind, HumanAction, LogFormat, Mode, SessionSnapshot};
use autonomy_core::ControllerId;
use tokio::sync::{mpsc, oneshot, watch};

#[derive(Debug, Clone)]
pub struct SessionSettings {
    /// How long a live human episode waits for the next operator action
    /// before the scripted human finishes it.
    pub human_timeout: Duration,
    /// Events buffered between the driver and a slow subscriber.
    pub event_buffer: usize,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            human_timeout: Duration::from_secs(30),
            event_buffer: 64,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Rejected(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("an event subscriber is already attached to this session")]
    AlreadySubscribed,
    #[error("session has stopped")]
    Closed,
}

struct PendingAction {
    action: HumanAction,
    reply: oneshot::Sender<Result<ActionAck, SessionError>>,
}

#[derive(Default)]
struct Logs {
    episodes: Vec<EpisodeLog>,
    evaluations: Vec<EvalLog>,
}

struct Shared {
    /// Events produced but not yet handed to a subscriber, kept across
    /// disconnects so the stream stays gapless.
    pending: Mutex<Vec<Event>>,
    subscribed: AtomicBool,
    logs: RwLock<Logs>,
}

impl Shared {
    fn push_pending(&self, events: impl IntoIterator<Item = Event>) {
        let mut p = self.pending.lock().expect("pending lock");
        p.extend(events);
        p.sort_by_key(|e| e.seq);
    }

    fn pop_pending(&self) -> Option<Event> {
        let mut p = self.pending.lock().expect("pending lock");
        if p.is_empty() {
            None
        } else {
            Some(p.remove(0))
        }
    }
}

pub struct Session {
    id: String,
    snapshot: watch::Receiver<Arc<SessionSnapshot>>,
    mode: watch::Sender<Mode>,
    actions: mpsc::Sender<PendingAction>,
    attach: mpsc::UnboundedSender<mpsc::Sender<Event>>,
    shared: Arc<Shared>,
    action_dim: usize,
    event_buffer: usize,
}

impl Session {
    /// Builds the runner and spawns its driver. The run stays paused until
    /// the first subscriber attaches.
    pub fn start(id: String, config: RunConfig, settings: SessionSettings) -> Result<Arc<Self>, SessionError> {
        let runner = Runner::new(config).map_err(|e| SessionError::Config(e.to_string()))?;
        let action_dim = runner.env().action_bounds().len();
        let (mode_tx, mode_rx) = watch::channel(Mode::ScriptedHuman);
        let (action_tx, action_rx) = mpsc::channel(8);
        let (attach_tx, attach_rx) = mpsc::unbounded_channel();
        let shared = Arc::new(Shared {
            pending: Mutex::new(Vec::new()),
            subscribed: AtomicBool::new(false),
            logs: RwLock::new(Logs::default()),
        });
        let mut driver = Driver {
            id: id.clone(),
            runner: Some(runner),
            settings: settings.clone(),
            snapshot: None,
            mode: mode_rx,
            actions: action_rx,
            attach: attach_rx,
            sink: None,
            shared: shared.clone(),
            seq: 0,
            awaiting: false,
            paused: true,
            finished: false,
            error: None,
        };
        let (snap_tx, snap_rx) = watch::channel(Arc::new(driver.make_snapshot()));
        driver.snapshot = Some(snap_tx);
        tokio::spawn(driver.run());
        Ok(Arc::new(Self {
            id,
            snapshot: snap_rx,
            mode: mode_tx,
            actions: action_tx,
            attach: attach_tx,
            shared,
            action_dim,
            event_buffer: settings.event_buffer.max(1),
        }))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn snapshot(&self) -> Arc<SessionSnapshot> {
        self.snapshot.borrow().clone()
    }

    /// Receiver that observes every published snapshot.
    pub fn watch(&self) -> watch::Receiver<Arc<SessionSnapshot>> {
        self.snapshot.clone()
    }

    pub fn set_mode(&self, mode: Mode) {
        self.mode.send_replace(mode);
    }

    pub fn mode(&self) -> Mode {
        *self.mode.borrow()
    }

    /// Attaches the single event subscriber. Events left undelivered by a
    /// previous subscriber come first.
    pub fn subscribe(&self) -> Result<Subscription, SessionError> {
        if self
            .shared
            .subscribed
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(SessionError::AlreadySubscribed);
        }
        let (tx, rx) = mpsc::channel(self.event_buffer);
        if self.attach.send(tx).is_err() {
            self.shared.subscribed.store(false, Ordering::Release);
            return Err(SessionError::Closed);
        }
        Ok(Subscription {
            rx,
            shared: self.shared.clone(),
            returned: None,
        })
    }

    /// Applies one operator action. Only accepted while the session is in
    /// live mode and blocked on a human episode.
    pub async fn post_action(&self, action: HumanAction) -> Result<ActionAck, SessionError> {
        let snap = self.snapshot();
        if let Some(reason) = rejection(&snap, self.mode()) {
            return Err(SessionError::Rejected(reason));
        }
        action
            .to_vec(self.action_dim)
            .map_err(|e| SessionError::InvalidAction(e.to_string()))?;
        let (reply, answer) = oneshot::channel();
        self.actions
            .send(PendingAction { action, reply })
            .await
            .map_err(|_| SessionError::Closed)?;
        answer.await.map_err(|_| SessionError::Closed)?
    }

    pub fn episodes(&self) -> Vec<EpisodeLog> {
        self.shared.logs.read().expect("log lock").episodes.clone()
    }

    pub fn log_text(&self, format: LogFormat) -> String {
        let logs = self.shared.logs.read().expect("log lock");
        match format {
            LogFormat::Episodes => to_jsonl(&logs.episodes).expect("episode logs serialize"),
            LogFormat::Summary => summary_csv(&logs.episodes),
            LogFormat::Eval => eval_csv(&logs.evaluations),
        }
    }
}

fn rejection(snap: &SessionSnapshot, mode: Mode) -> Option<String> {
    if snap.finished {
        return Some("the run has finished".into());
    }
    if mode != Mode::LiveHuman {
        return Some("session is in scripted_human mode; switch to live_human first".into());
    }
    match snap.status.controller {
        None => Some("no episode is in progress".into()),
        Some(c) if c != ControllerId::Human => Some(format!(
            "episode {} is driven by the {} controller",
            snap.status.next_episode,
            c.as_str()
        )),
        Some(_) if !snap.awaiting_human => Some("the human episode is not waiting for input".into()),
        Some(_) => None,
    }
}

/// The receiving end of a session's event stream. Dropping it hands every
/// unread event back to the session, which pauses until the next
/// subscriber.
pub struct Subscription {
    rx: mpsc::Receiver<Event>,
    shared: Arc<Shared>,
    returned: Option<Event>,
}

impl Subscription {
    pub async fn next(&mut self) -> Option<Event> {
        self.rx.recv().await
    }

    /// Puts back an event that was taken but could not be forwarded.
    pub fn return_event(&mut self, event: Event) {
        self.returned = Some(event);
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.rx.close();
        let mut unread: Vec<Event> = self.returned.take().into_iter().collect();
        while let Ok(ev) = self.rx.try_recv() {
            unread.push(ev);
        }
        self.shared.push_pending(unread);
        self.shared.subscribed.store(false, Ordering::Release);
    }
}

enum Exit {
    /// Every handle to the session is gone.
    Shutdown,
    Failed(String),
}

type StepOutcome = (StepRecord, Option<EpisodeLog>);

struct Driver {
    id: String,
    runner: Option<Runner>,
    settings: SessionSettings,
    snapshot: Option<watch::Sender<Arc<SessionSnapshot>>>,
    mode: watch::Receiver<Mode>,
    actions: mpsc::Receiver<PendingAction>,
    attach: mpsc::UnboundedReceiver<mpsc::Sender<Event>>,
    sink: Option<mpsc::Sender<Event>>,
    shared: Arc<Shared>,
    seq: u64,
    awaiting: bool,
    paused: bool,
    finished: bool,
    error: Option<String>,
}

impl Driver {
    fn runner(&self) -> &Runner {
        self.runner.as_ref().expect("runner is home between steps")
    }

    fn make_snapshot(&self) -> SessionSnapshot {
        let runner = self.runner();
        SessionSnapshot {
            id: self.id.clone(),
            env: runner.env().name().to_string(),
            mode: *self.mode.borrow(),
            action_bounds: runner.env().action_bounds(),
            awaiting_human: self.awaiting,
            paused: self.paused,
            finished: self.finished,
            last_seq: self.seq.checked_sub(1),
            error: self.error.clone(),
            status: runner.status(),
        }
    }

    fn publish(&self) {
        if let Some(tx) = &self.snapshot {
            tx.send_replace(Arc::new(self.make_snapshot()));
        }
    }

    async fn run(mut self) {
        match self.drive().await {
            Ok(()) | Err(Exit::Shutdown) => {}
            Err(Exit::Failed(message)) => {
                tracing::error!(session = %self.id, %message, "run stopped");
                self.error = Some(message.clone());
                self.finished = true;
                let _ = self.emit(EventKind::RunError { message }).await;
            }
        }
        self.reject_queued("the run has finished");
    }

    async fn drive(&mut self) -> Result<(), Exit> {
        self.wait_for_subscriber().await?;
        while !self.runner().is_finished() {
            let start = self.blocking(|r| r.begin_episode()).await?;
            let is_human = start.controller == ControllerId::Human;
            self.publish();
            self.emit(EventKind::EpisodeStart { start }).await?;
            let mut fallback = false;
            loop {
                let live = is_human && !fallback && *self.mode.borrow() == Mode::LiveHuman;
                let outcome = if live {
                    match self.human_step(&mut fallback).await? {
                        Some(o) => o,
                        None => continue,
                    }
                } else {
                    self.blocking(|r| r.step()).await?
                };
                let (record, log) = outcome;
                self.publish();
                let controller = log.as_ref().map_or_else(
                    || self.runner().current_controller().expect("episode in progress"),
                    |l| l.controller,
                );
                self.emit(EventKind::Step { controller, record }).await?;
                if let Some(log) = log {
                    self.end_episode(log).await?;
                    break;
                }
            }
        }
        self.finished = true;
        self.publish();
        let (episodes, cumulative_cost) = (self.runner().next_episode(), self.runner().cumulative_cost());
        self.emit(EventKind::RunEnd {
            episodes,
            cumulative_cost,
        })
        .await
    }

    async fn end_episode(&mut self, log: EpisodeLog) -> Result<(), Exit> {
        self.reject_queued("the human episode has ended");
        let after = log.episode;
        self.shared.logs.write().expect("log lock").episodes.push(log.clone());
        self.emit(EventKind::EpisodeEnd { log }).await?;
        if let Some(n) = self.runner().config().evaluation_every() {
            if (after + 1) % n == 0 {
                let eval = self.blocking(move |r| r.run_evaluation_episode(after)).await?;
                self.shared.logs.write().expect("log lock").evaluations.push(eval.clone());
                self.emit(EventKind::Evaluation { eval }).await?;
            }
        }
        Ok(())
    }

    /// Waits for one operator action. `None` means the operator timed out
    /// or live mode was switched off, and the scripted human takes over.
    async fn human_step(&mut self, fallback: &mut bool) -> Result<Option<StepOutcome>, Exit> {
        self.reject_queued("the human episode is not waiting for input");
        self.awaiting = true;
        self.publish();
        let status = self.runner().status();
        self.emit(EventKind::AwaitingHuman {
            episode: status.next_episode,
            step: status.step,
            observation: status.observation,
        })
        .await?;
        let dim = self.runner().env().action_bounds().len();
        let timeout = tokio::time::sleep(self.settings.human_timeout);
        tokio::pin!(timeout);
        loop {
            tokio::select! {
                msg = self.actions.recv() => {
                    let Some(PendingAction { action, reply }) = msg else {
                        return Err(Exit::Shutdown);
                    };
                    let action = match action.to_vec(dim) {
                        Ok(a) => a,
                        Err(e) => {
                            let _ = reply.send(Err(SessionError::InvalidAction(e.to_string())));
                            continue;
                        }
                    };
                    self.awaiting = false;
                    self.publish();
                    let (record, log) = self.blocking(move |r| r.apply_action(&action)).await?;
                    let _ = reply.send(Ok(ActionAck { record: record.clone(), episode_end: log.clone() }));
                    return Ok(Some((record, log)));
                }
                _ = &mut timeout => {
                    tracing::info!(session = %self.id, "operator timed out; scripted human finishes the episode");
                    self.awaiting = false;
                    self.blocking(|r| r.mark_teleop_fallback()).await?;
                    *fallback = true;
                    self.publish();
                    return Ok(None);
                }
                changed = self.mode.changed() => {
                    if changed.is_err() {
                        return Err(Exit::Shutdown);
                    }
                    if *self.mode.borrow() != Mode::LiveHuman {
                        self.awaiting = false;
                        self.publish();
                        return Ok(None);
                    }
                }
            }
        }
    }

    fn reject_queued(&mut self, reason: &str) {
        while let Ok(p) = self.actions.try_recv() {
            let _ = p.reply.send(Err(SessionError::Rejected(reason.into())));
        }
    }

    /// Runs `f` on the blocking pool so training never stalls the reactor.
    async fn blocking<T, F>(&mut self, f: F) -> Result<T, Exit>
    where
        T: Send + 'static,
        F: FnOnce(&mut Runner) -> autonomy_core::Result<T> + Send + 'static,
    {
        let mut runner = self.runner.take().expect("runner is home between steps");
        let joined = tokio::task::spawn_blocking(move || {
            let out = f(&mut runner);
            (runner, out)
        })
        .await;
        match joined {
            Ok((runner, out)) => {
                self.runner = Some(runner);
                out.map_err(|e| Exit::Failed(e.to_string()))
            }
            Err(e) => Err(Exit::Failed(format!("episode loop panicked: {e}"))),
        }
    }

    async fn emit(&mut self, kind: EventKind) -> Result<(), Exit> {
        let event = Event { seq: self.seq, kind };
        self.seq += 1;
        self.publish();
        self.shared.push_pending([event]);
        loop {
            if self.sink.is_none() {
                self.wait_for_subscriber().await?;
            }
            if self.flush().await {
                return Ok(());
            }
        }
    }

    /// Forwards pending events in order. Returns false if the subscriber
    /// went away first; the undelivered event goes back to pending.
    async fn flush(&mut self) -> bool {
        let sink = self.sink.clone().expect("flush needs a subscriber");
        while let Some(ev) = self.shared.pop_pending() {
            if let Err(mpsc::error::SendError(ev)) = sink.send(ev).await {
                self.shared.push_pending([ev]);
                self.sink = None;
                return false;
            }
        }
        true
    }

    async fn wait_for_subscriber(&mut self) -> Result<(), Exit> {
        self.sink = None;
        loop {
            self.paused = true;
            if self.runner.is_some() {
                self.publish();
            }
            let Some(tx) = self.attach.recv().await else {
                return Err(Exit::Shutdown);
            };
            if !tx.is_closed() {
                self.sink = Some(tx);
                self.paused = false;
                if self.runner.is_some() {
                    self.publish();
                }
                return Ok(());
            }
        }
    }
}
