/**
 * Browser entry point: wires the reducer, text panels, and the
 * three.js viewport to a live session.
 *
 * The page connects through an NDJSON-over-WebSocket bridge in front
 * of the TCP service (`?ws=ws://host:port`); every displayed quantity
 * comes from server messages via the same reducer the tests exercise.
 */
import * as THREE from "three";

import { parseServerLine, type Request } from "./protocol.js";
import { renderFrame } from "./render.js";
import {
  buildAnatomy,
  buildPathLine,
  buildTipMarker,
  updateTip,
} from "./scene3d.js";
import { LineSplitter } from "./transport.js";
import {
  actionAllowed,
  initialViewModel,
  reduce,
  type ViewModel,
} from "./viewmodel.js";

function start(): void {
  const params = new URLSearchParams(window.location.search);
  const url = params.get("ws") ?? "ws://127.0.0.1:7314";
  const panel = document.getElementById("panel") as HTMLPreElement;
  const viewport = document.getElementById("viewport") as HTMLDivElement;

  let vm: ViewModel = initialViewModel();
  let nextId = 1;

  const scene = new THREE.Scene();
  scene.add(new THREE.AmbientLight(0xffffff, 0.6));
  const sun = new THREE.DirectionalLight(0xffffff, 0.8);
  sun.position.set(1, 1, 1);
  scene.add(sun);
  const tip = buildTipMarker();
  scene.add(tip);
  let anatomy: THREE.Group | null = null;
  let pathLine: THREE.Line | null = null;

  const camera = new THREE.PerspectiveCamera(
    50,
    viewport.clientWidth / viewport.clientHeight,
    1,
    2000,
  );
  camera.position.set(0, -350, 150);
  camera.lookAt(0, 0, 0);
  const renderer = new THREE.WebGLRenderer({ antialias: true });
  renderer.setSize(viewport.clientWidth, viewport.clientHeight);
  viewport.appendChild(renderer.domElement);

  // frame-coalescing buffer: messages reduce immediately, pixels update
  // once per animation frame
  let dirty = true;
  function loop(): void {
    if (dirty) {
      panel.textContent = renderFrame(vm).join("\n");
      if (vm.geometry && !anatomy) {
        anatomy = buildAnatomy(vm.geometry);
        scene.add(anatomy);
      }
      if (vm.plannedPath.length > 0 && !pathLine) {
        pathLine = buildPathLine(vm.plannedPath, true);
        scene.add(pathLine);
      }
      if (vm.tip) updateTip(tip, vm.tip);
      renderer.render(scene, camera);
      dirty = false;
    }
    requestAnimationFrame(loop);
  }

  const socket = new WebSocket(url);
  const splitter = new LineSplitter();
  socket.onmessage = (msgEvent) => {
    for (const line of splitter.push(String(msgEvent.data))) {
      vm = reduce(vm, { dir: "recv", msg: parseServerLine(line) });
      dirty = true;
    }
  };
  socket.onclose = () => {
    panel.textContent = "RECONNECTING…\n" + renderFrame(vm).join("\n");
  };

  function send(type: Request["type"], fields: Record<string, unknown>): void {
    if (!actionAllowed(vm, type)) return; // button should be disabled
    const msg: Request = { v: 1, type, id: nextId++, ...fields };
    vm = reduce(vm, { dir: "send", msg });
    socket.send(JSON.stringify(msg) + "\n");
    dirty = true;
  }

  // minimal control surface; real buttons call these
  (window as unknown as Record<string, unknown>).lungsteer = {
    send,
    aimDeltaDeg: (yawDeg: number, pitchDeg: number) =>
      send("aim", {
        yaw: (yawDeg * Math.PI) / 180,
        pitch: (pitchDeg * Math.PI) / 180,
      }),
    viewModel: () => vm,
  };

  loop();
}

if (typeof window !== "undefined" && typeof document !== "undefined") {
  window.addEventListener("DOMContentLoaded", start);
}
