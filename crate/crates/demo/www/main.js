import init, { encodingCurve, graphView, seriesView } from "./pkg/sstgnn_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const HOP_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2"];

function bindOutputs() {
  for (const input of document.querySelectorAll("input[type=range]")) {
    const out = input.parentElement.querySelector("output");
    const show = () => { out.textContent = input.value; };
    input.addEventListener("input", show);
    show();
  }
}

function frame(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  return ctx;
}

function plotLines(canvas, series, yMin, yMax, pad = 28) {
  const ctx = frame(canvas);
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  const n = series[0].values.length;
  const x = (i) => pad + (i / Math.max(n - 1, 1)) * w;
  const y = (v) => pad + (1 - (v - yMin) / (yMax - yMin)) * h;
  ctx.strokeStyle = "#ccc";
  ctx.beginPath();
  ctx.moveTo(pad, y(0 >= yMin && 0 <= yMax ? 0 : yMin));
  ctx.lineTo(pad + w, y(0 >= yMin && 0 <= yMax ? 0 : yMin));
  ctx.stroke();
  ctx.fillStyle = "#666";
  ctx.fillText(yMax.toFixed(1), 2, pad + 4);
  ctx.fillText(yMin.toFixed(1), 2, pad + h);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = s.width ?? 1.5;
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
    ctx.stroke();
  }
  return { x, pad, w, h, ctx };
}

function drawEncoding() {
  const hr = num("enc-hr");
  $("enc-off").max = 24 * hr;
  const days = num("enc-days");
  const c = JSON.parse(encodingCurve(hr, num("enc-off"), days * 24 * hr));
  const plot = plotLines($("enc-canvas"), [
    { values: c.daily, color: "#1f77b4", width: 1 },
    { values: c.weekly, color: "#ff7f0e", width: 1 },
    { values: c.total, color: "#111", width: 2 },
  ], -2, 2);
  plot.ctx.strokeStyle = "#eee";
  for (let d = 1; d < days; d++) {
    const px = plot.x(d * c.samples_per_day);
    plot.ctx.beginPath();
    plot.ctx.moveTo(px, plot.pad);
    plot.ctx.lineTo(px, plot.pad + plot.h);
    plot.ctx.stroke();
  }
}

let graphSource = 0;
let graphLayout = null;

function drawGraph() {
  const n = num("g-n");
  graphSource = Math.min(graphSource, n - 1);
  const canvas = $("g-canvas");
  let v;
  try {
    v = JSON.parse(graphView(n, num("g-seed"), num("g-delta"), num("g-eps"), graphSource, num("g-k")));
  } catch (e) {
    frame(canvas);
    $("g-note").textContent = String(e);
    $("g-note").className = "note error";
    return;
  }
  const xs = v.positions.map((p) => p[0]);
  const ys = v.positions.map((p) => p[1]);
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  const pad = 24;
  const scale = Math.min((canvas.width - 2 * pad) / (x1 - x0 || 1), (canvas.height - 2 * pad) / (y1 - y0 || 1));
  const px = (p) => [pad + (p[0] - x0) * scale, pad + (p[1] - y0) * scale];
  graphLayout = v.positions.map(px);

  const ctx = frame(canvas);
  ctx.strokeStyle = "#bbb";
  ctx.lineWidth = 1;
  for (const [i, j] of v.edges) {
    ctx.beginPath();
    ctx.moveTo(...graphLayout[i]);
    ctx.lineTo(...graphLayout[j]);
    ctx.stroke();
  }
  graphLayout.forEach(([x, y], i) => {
    const hop = v.hop[i];
    ctx.fillStyle = hop === null ? "#ddd" : HOP_COLORS[Math.min(hop, HOP_COLORS.length - 1)];
    ctx.beginPath();
    ctx.arc(x, y, hop === 0 ? 8 : 5.5, 0, 2 * Math.PI);
    ctx.fill();
  });
  const rings = v.hop_sizes.map((s, k) => `hop ${k + 1}: ${s}`).join(", ");
  $("g-note").className = "note";
  $("g-note").textContent =
    `${v.edges.length} edges, ${v.connected ? "connected" : "disconnected"}, ` +
    `edge if distance <= ${v.cutoff.toFixed(4)}; source ${graphSource}; ${rings}`;
}

function pickSource(ev) {
  if (!graphLayout) return;
  const canvas = $("g-canvas");
  const r = canvas.getBoundingClientRect();
  const x = ((ev.clientX - r.left) * canvas.width) / r.width;
  const y = ((ev.clientY - r.top) * canvas.height) / r.height;
  let best = 0;
  let bestD = Infinity;
  graphLayout.forEach(([gx, gy], i) => {
    const d = (gx - x) ** 2 + (gy - y) ** 2;
    if (d < bestD) [best, bestD] = [i, d];
  });
  graphSource = best;
  drawGraph();
}

function drawSeries() {
  const p = num("s-p");
  $("s-day").min = p;
  const v = JSON.parse(seriesView(10, 1, num("s-noise"), num("s-sensor"), num("s-day"), p));
  const all = v.truth.concat(v.average);
  plotLines($("s-canvas"), [
    { values: v.average, color: "#ff7f0e" },
    { values: v.truth, color: "#111" },
  ], Math.floor(Math.min(...all) - 2), Math.ceil(Math.max(...all) + 2));
  const m = v.metrics;
  $("s-note").textContent =
    `black: observed, orange: mean of the previous ${p} day(s). ` +
    `MAE ${m.mae.toFixed(2)}, RMSE ${m.rmse.toFixed(2)}, MAPE ${m.mape === null ? "undef" : m.mape.toFixed(2) + "%"}`;
}

async function main() {
  await init();
  bindOutputs();
  for (const id of ["enc-hr", "enc-off", "enc-days"]) $(id).addEventListener("input", drawEncoding);
  for (const id of ["g-n", "g-seed", "g-delta", "g-eps", "g-k"]) $(id).addEventListener("input", drawGraph);
  for (const id of ["s-sensor", "s-day", "s-p", "s-noise"]) $(id).addEventListener("input", drawSeries);
  $("g-canvas").addEventListener("click", pickSource);
  drawEncoding();
  drawGraph();
  drawSeries();
}

main().catch((e) => {
  document.body.insertAdjacentHTML("afterbegin", `<p class="error">${e}</p>`);
});
