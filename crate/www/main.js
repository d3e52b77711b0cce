import init, { bundledCase, solve, scan, kron } from "./pkg/opf_relax_web.js";

const $ = (id) => document.getElementById(id);

function show(id, text, failed = false) {
  const el = $(id);
  el.textContent = text;
  el.classList.toggle("error", failed);
}

// Runs `fn` after the browser has painted the busy message.
function busy(id, fn) {
  show(id, "working…");
  setTimeout(() => {
    try {
      fn();
    } catch (e) {
      show(id, String(e.message ?? e), true);
    }
  }, 20);
}

function loadCase() {
  $("case-text").value = bundledCase($("case-name").value);
}

function drawScan(records, bus) {
  const canvas = $("plot");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const key = `p${bus}_target`;
  const pts = records.filter((r) => r.p1 !== null && r.status === "optimal");
  if (pts.length === 0) return;
  const xs = pts.map((r) => r[key]);
  const ys = pts.map((r) => r.p1);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (y1 - y0 < 1e-6) { y0 -= 1; y1 += 1; }
  const pad = 40;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0)) * (h - 2 * pad);

  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.moveTo(pad, pad / 2);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad / 2, h - pad);
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.font = "12px sans-serif";
  ctx.fillText(`P${bus} target`, w / 2 - 30, h - 10);
  ctx.fillText("P1", 8, pad / 2 + 4);
  ctx.fillText(x0.toFixed(2), pad - 10, h - pad + 15);
  ctx.fillText(x1.toFixed(2), w - pad - 20, h - pad + 15);
  ctx.fillText(y1.toFixed(2), 2, pad + 4);
  ctx.fillText(y0.toFixed(2), 2, h - pad);

  for (const r of pts) {
    ctx.beginPath();
    ctx.arc(sx(r[key]), sy(r.p1), 4, 0, 2 * Math.PI);
    ctx.strokeStyle = r.exact ? "#1565c0" : "#c62828";
    ctx.fillStyle = ctx.strokeStyle;
    if (r.exact) ctx.fill();
    else ctx.stroke();
  }
}

function runScan() {
  const bus = Number($("scan-bus").value);
  const out = scan(
    $("case-text").value,
    $("scan-relaxation").value,
    bus,
    Number($("scan-lo").value),
    Number($("scan-hi").value),
    Number($("scan-step").value),
  );
  const records = JSON.parse(out);
  drawScan(records, bus);
  const exact = records.filter((r) => r.exact).length;
  show("scan-out", `${records.length} points, ${exact} rank one`);
}

await init();
loadCase();
$("case-name").addEventListener("change", loadCase);
$("solve").addEventListener("click", () =>
  busy("solve-out", () => {
    const doc = JSON.parse(solve($("case-text").value, $("relaxation").value));
    show("solve-out", doc.summary);
  }),
);
$("scan").addEventListener("click", () => busy("scan-out", runScan));
$("kron").addEventListener("click", () =>
  busy("kron-out", () => show("kron-out", kron($("case-text").value, Number($("kron-bus").value)))),
);
