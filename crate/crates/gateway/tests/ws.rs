use buzzwire_gateway::{Gateway, GatewayConfig};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use std::time::Duration;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn gateway(configure: impl FnOnce(&mut GatewayConfig)) -> Gateway {
    let mut config = GatewayConfig { addr: "127.0.0.1:0".parse().unwrap(), ..GatewayConfig::default() };
    configure(&mut config);
    Gateway::bind(config).await.expect("gateway binds")
}

async fn connect(gw: &Gateway) -> Ws {
    let (ws, _) = connect_async(format!("ws://{}/ws", gw.local_addr())).await.expect("ws connect");
    ws
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

/// Next message whose `type` matches, skipping others (mostly state frames).
async fn expect_type(ws: &mut Ws, kind: &str) -> Value {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    loop {
        let msg = tokio::time::timeout_at(deadline, ws.next())
            .await
            .unwrap_or_else(|_| panic!("timed out waiting for {kind}"))
            .expect("stream open")
            .expect("ws frame");
        if let Message::Text(text) = msg {
            let v: Value = serde_json::from_str(&text).unwrap();
            if v["type"] == kind {
                return v;
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn hello_returns_config_snapshot() {
    let gw = gateway(|_| {}).await;
    let mut ws = connect(&gw).await;
    send(&mut ws, json!({"type": "hello", "seq": 1, "protocol_version": 1})).await;
    let cfg = expect_type(&mut ws, "config").await;
    assert_eq!(cfg["protocol_version"], 1);
    assert_eq!(cfg["mode"], "sc_user");
    assert_eq!(cfg["trial_phase"], "between_trials");
    assert_eq!(cfg["frame_rate"], 60.0);
    assert_eq!(cfg["tick_rate"], 100.0);
    assert_eq!(cfg["ui_scale"], json!({"min": 10, "max": 100, "step": 5}));
    assert_eq!(cfg["alpha"].as_array().unwrap().len(), 6);
    assert!(cfg["course"]["points"].as_array().unwrap().len() > 10);
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn frames_arrive_near_sixty_hertz_with_increasing_seq() {
    let gw = gateway(|_| {}).await;
    let mut ws = connect(&gw).await;
    let first = expect_type(&mut ws, "state").await;
    let mut last = first.clone();
    let mut n = 0;
    while n < 30 {
        let f = expect_type(&mut ws, "state").await;
        assert!(f["seq"].as_u64() > last["seq"].as_u64());
        last = f;
        n += 1;
    }
    let dt = last["t"].as_f64().unwrap() - first["t"].as_f64().unwrap();
    let rate = 30.0 / dt;
    assert!((50.0..70.0).contains(&rate), "frame rate {rate}");
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_and_unknown_messages_get_errors() {
    let gw = gateway(|_| {}).await;
    let mut ws = connect(&gw).await;
    ws.send(Message::Text("{not json".into())).await.unwrap();
    let e = expect_type(&mut ws, "error").await;
    assert_eq!(e["reason"], "parse");
    send(&mut ws, json!({"type": "warp_drive", "seq": 5})).await;
    let e = expect_type(&mut ws, "error").await;
    assert_eq!((e["reason"].as_str(), e["request"].as_u64()), (Some("unknown_type"), Some(5)));
    send(&mut ws, json!({"type": "edit_factor", "seq": 6, "factor": "gravity", "direction": "+"})).await;
    assert_eq!(expect_type(&mut ws, "error").await["reason"], "invalid_field");
    // the connection survives all of the above
    send(&mut ws, json!({"type": "hello"})).await;
    expect_type(&mut ws, "config").await;
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn edit_is_acked_and_reflected_in_frames() {
    let gw = gateway(|_| {}).await;
    let mut ws = connect(&gw).await;
    send(&mut ws, json!({"type": "hello"})).await;
    let before = expect_type(&mut ws, "config").await["factors"]["safety"].as_u64().unwrap();
    send(&mut ws, json!({"type": "edit_factor", "seq": 2, "factor": "safety", "direction": "-"})).await;
    let ack = expect_type(&mut ws, "ack").await;
    assert_eq!(ack["request"], 2);
    assert_eq!(ack["factors"]["safety"].as_u64().unwrap(), before - 5);
    let frame = expect_type(&mut ws, "state").await;
    assert_eq!(frame["factors"]["safety"].as_u64().unwrap(), before - 5);
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn edit_during_trial_is_rejected_and_trial_times_out() {
    let gw = gateway(|c| c.sim.time_limit = 0.5).await;
    let mut ws = connect(&gw).await;
    send(&mut ws, json!({"type": "start_trial", "seq": 1})).await;
    assert_eq!(expect_type(&mut ws, "ack").await["trial_phase"], "running");
    send(&mut ws, json!({"type": "edit_factor", "seq": 2, "factor": "speed", "direction": "+"})).await;
    let r = expect_type(&mut ws, "rejected").await;
    assert_eq!((r["reason"].as_str(), r["request"].as_u64()), (Some("trial_running"), Some(2)));
    send(&mut ws, json!({"type": "start_trial", "seq": 3})).await;
    assert_eq!(expect_type(&mut ws, "rejected").await["reason"], "trial_running");

    let end = expect_type(&mut ws, "trial_end").await;
    assert_eq!(end["outcome"], "timeout");
    assert_eq!(end["trial"], 0);
    assert!(end["metrics"].is_object());
    send(&mut ws, json!({"type": "edit_factor", "seq": 4, "factor": "speed", "direction": "+"})).await;
    assert_eq!(expect_type(&mut ws, "rejected").await["reason"], "review");
    send(&mut ws, json!({"type": "end_review", "seq": 5})).await;
    assert_eq!(expect_type(&mut ws, "ack").await["trial_phase"], "between_trials");
    send(&mut ws, json!({"type": "edit_factor", "seq": 6, "factor": "speed", "direction": "+"})).await;
    expect_type(&mut ws, "ack").await;
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn quaternion_tolerance_on_input() {
    let gw = gateway(|_| {}).await;
    let mut ws = connect(&gw).await;
    let pose = |w: f64| json!({"position": [0.0, 0.0, 0.0], "orientation": [w, 0.0, 0.0, 0.0]});
    send(&mut ws, json!({"type": "input", "seq": 1, "pose": pose(1.0005)})).await;
    send(&mut ws, json!({"type": "input", "seq": 2, "pose": pose(1.01)})).await;
    let e = expect_type(&mut ws, "error").await;
    // only the far-from-unit quaternion is refused
    assert_eq!((e["reason"].as_str(), e["request"].as_u64()), (Some("invalid_pose"), Some(2)));
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn input_drives_robot_during_trial() {
    let gw = gateway(|_| {}).await;
    let mut ws = connect(&gw).await;
    send(&mut ws, json!({"type": "start_trial"})).await;
    expect_type(&mut ws, "ack").await;
    let start = expect_type(&mut ws, "state").await["robot_pose"].clone();
    let mut target = start.clone();
    target["position"][0] = json!(start["position"][0].as_f64().unwrap() + 0.01);
    send(&mut ws, json!({"type": "input", "pose": target})).await;
    let mut frame = expect_type(&mut ws, "state").await;
    while frame["handle_pose"]["position"] != target["position"] {
        frame = expect_type(&mut ws, "state").await;
    }
    // about half a second of frames after the input took effect
    for _ in 0..30 {
        frame = expect_type(&mut ws, "state").await;
    }
    let moved = frame["robot_pose"]["position"][0].as_f64().unwrap() - start["position"][0].as_f64().unwrap();
    assert!(moved > 1e-3, "robot moved {moved}");
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn input_client_disconnect_aborts_trial() {
    let gw = gateway(|_| {}).await;
    let mut observer = connect(&gw).await;
    let mut driver = connect(&gw).await;
    send(&mut driver, json!({"type": "start_trial"})).await;
    expect_type(&mut driver, "ack").await;
    let pose = expect_type(&mut driver, "state").await["robot_pose"].clone();
    send(&mut driver, json!({"type": "input", "pose": pose})).await;
    tokio::time::sleep(Duration::from_millis(100)).await;
    driver.close(None).await.unwrap();
    drop(driver);
    let end = expect_type(&mut observer, "trial_end").await;
    assert_eq!(end["outcome"], "aborted");
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn sc_mode_refuses_edits() {
    let gw = gateway(|c| {
        c.mode = buzzwire_core::Mode::Sc;
        c.adaptation = Some(buzzwire_core::experiment::AdaptationConfig { r_d: [0.0, 0.0, 0.0], chi_nom: 0.1 });
    })
    .await;
    let mut ws = connect(&gw).await;
    send(&mut ws, json!({"type": "edit_factor", "factor": "speed", "direction": "+"})).await;
    assert_eq!(expect_type(&mut ws, "rejected").await["reason"], "edits_disabled");
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn healthz_reports_ok() {
    let gw = gateway(|_| {}).await;
    let mut tcp = TcpStream::connect(gw.local_addr()).await.unwrap();
    tcp.write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut buf = String::new();
    tcp.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    let body: Value = serde_json::from_str(buf.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body, json!({"status": "ok", "protocol_version": 1}));
    gw.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_config_is_refused() {
    let bad_course = GatewayConfig { course: "no-such-course".into(), ..GatewayConfig::default() };
    assert!(Gateway::bind(bad_course).await.is_err());
    let sc_without_rd = GatewayConfig { mode: buzzwire_core::Mode::Sc, ..GatewayConfig::default() };
    assert!(Gateway::bind(sc_without_rd).await.is_err());
}
