import init, { mlr_field, exp_grid, ahcd_trajectory } from "./pkg/pehcm_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function bindOutputs() {
  for (const input of document.querySelectorAll("input[type=range]")) {
    const out = input.nextElementSibling;
    const show = () => { out.textContent = input.value; };
    input.addEventListener("input", show);
    show();
  }
}

function showError(e) {
  $("error").textContent = String(e && e.message ? e.message : e);
}

// MLR field --------------------------------------------------------------

const RES = 160;
let anchor = [0.2, -0.1];

function drawMlr() {
  const canvas = $("mlr");
  const ctx = canvas.getContext("2d");
  const c = num("mlr-c");
  const radius = 1 / Math.sqrt(c);
  const t = (num("mlr-angle") * Math.PI) / 180;
  const len = num("mlr-len");
  let field;
  try {
    field = mlr_field(anchor[0] * radius, anchor[1] * radius, len * Math.cos(t), len * Math.sin(t), c, RES);
  } catch (e) {
    return showError(e);
  }
  let scale = 0;
  for (const v of field) if (Number.isFinite(v)) scale = Math.max(scale, Math.abs(v));
  const img = ctx.createImageData(RES, RES);
  for (let i = 0; i < field.length; i++) {
    const v = field[i];
    const px = img.data.subarray(4 * i, 4 * i + 4);
    if (!Number.isFinite(v)) {
      px.set([255, 255, 255, 255]);
      continue;
    }
    const s = Math.tanh((3 * v) / (scale || 1));
    const edge = Math.abs(v) < scale * 0.01 ? 255 : 0;
    px.set(s >= 0
      ? [255 * (1 - s) | edge, 255 * (1 - 0.6 * s) | edge, 255, 255]
      : [255, 255 * (1 + 0.6 * s) | edge, 255 * (1 + s) | edge, 255]);
  }
  const off = new OffscreenCanvas(RES, RES);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.imageSmoothingEnabled = true;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  const w = canvas.width / 2;
  ctx.strokeStyle = "#333";
  ctx.beginPath();
  ctx.arc(w, w, w - 1, 0, 2 * Math.PI);
  ctx.stroke();
  ctx.fillStyle = "#000";
  ctx.beginPath();
  ctx.arc(w + anchor[0] * w, w - anchor[1] * w, 4, 0, 2 * Math.PI);
  ctx.fill();
  ctx.strokeStyle = "#000";
  ctx.beginPath();
  ctx.moveTo(w + anchor[0] * w, w - anchor[1] * w);
  ctx.lineTo(w + anchor[0] * w + 25 * Math.cos(t), w - anchor[1] * w - 25 * Math.sin(t));
  ctx.stroke();
}

function onMlrClick(ev) {
  const canvas = $("mlr");
  const rect = canvas.getBoundingClientRect();
  const w = rect.width / 2;
  const x = (ev.clientX - rect.left - w) / w;
  const y = -(ev.clientY - rect.top - w) / w;
  const r = Math.hypot(x, y);
  anchor = r < 0.95 ? [x, y] : [(0.95 * x) / r, (0.95 * y) / r];
  drawMlr();
}

// Exp-map grid -----------------------------------------------------------

const SAMPLES = 80;

function drawGrid() {
  const canvas = $("grid");
  const ctx = canvas.getContext("2d");
  const c = num("grid-c");
  const lines = num("grid-lines");
  let pts;
  try {
    pts = exp_grid(c, num("grid-extent"), lines, SAMPLES);
  } catch (e) {
    return showError(e);
  }
  const w = canvas.width / 2;
  const k = (w - 2) * Math.sqrt(c);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#333";
  ctx.beginPath();
  ctx.arc(w, w, w - 2, 0, 2 * Math.PI);
  ctx.stroke();
  for (let l = 0; l < 2 * lines; l++) {
    ctx.strokeStyle = l < lines ? "#2a6fdb" : "#e07b18";
    ctx.beginPath();
    for (let s = 0; s < SAMPLES; s++) {
      const i = 2 * (l * SAMPLES + s);
      const x = w + k * pts[i];
      const y = w - k * pts[i + 1];
      if (s === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    }
    ctx.stroke();
  }
}

// AHCD trajectory --------------------------------------------------------

const EPOCHS = 60;
const STEPS = 20;
const REINIT = new Uint32Array([36, 48]);

function drawAhcd() {
  const canvas = $("ahcd");
  const ctx = canvas.getContext("2d");
  const m1 = num("ahcd-m1");
  const m2 = num("ahcd-m2");
  let v;
  try {
    v = ahcd_trajectory(num("ahcd-beta"), m1, m2, num("ahcd-noise"), EPOCHS, STEPS, REINIT, 7n);
  } catch (e) {
    return showError(e);
  }
  const n = v.length / 2;
  const W = canvas.width;
  const H = canvas.height;
  const pad = 24;
  const X = (i) => pad + ((W - 2 * pad) * i) / (n - 1);
  const Y = (d) => H - pad - (H - 2 * pad) * d;
  ctx.clearRect(0, 0, W, H);
  ctx.fillStyle = "#eee";
  for (const e of REINIT) ctx.fillRect(X(e * STEPS) - 1, pad, 2, H - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, W - 2 * pad, H - 2 * pad);
  ctx.fillStyle = "#666";
  ctx.fillText("1", 8, Y(1) + 4);
  ctx.fillText("0", 8, Y(0) + 4);
  ctx.fillText(`epoch ${EPOCHS}`, W - pad - 48, H - 8);
  const series = [[0, "#2a6fdb", m1], [1, "#e07b18", m2]];
  for (const [off, color, mean] of series) {
    ctx.setLineDash([4, 4]);
    ctx.strokeStyle = color;
    ctx.beginPath();
    ctx.moveTo(pad, Y(mean));
    ctx.lineTo(W - pad, Y(mean));
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.beginPath();
    for (let i = 0; i < n; i++) {
      const y = Y(Math.min(1.2, Math.max(-0.2, v[2 * i + off])));
      if (i === 0) ctx.moveTo(X(i), y);
      else ctx.lineTo(X(i), y);
    }
    ctx.stroke();
  }
}

async function main() {
  await init();
  bindOutputs();
  for (const id of ["mlr-angle", "mlr-len", "mlr-c"]) $(id).addEventListener("input", drawMlr);
  for (const id of ["grid-extent", "grid-lines", "grid-c"]) $(id).addEventListener("input", drawGrid);
  for (const id of ["ahcd-beta", "ahcd-m1", "ahcd-m2", "ahcd-noise"]) $(id).addEventListener("input", drawAhcd);
  $("mlr").addEventListener("click", onMlrClick);
  drawMlr();
  drawGrid();
  drawAhcd();
}

main().catch(showError);
